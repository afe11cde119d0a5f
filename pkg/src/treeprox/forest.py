"""Bagged regression-tree ensembles with per-node feature subsampling.

Each tree gets its own RNG stream derived from the master seed by tree
index, so a parallel fit would agree bit-for-bit with the serial one.
Predictions average over trees by summing in tree-index order.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict

import numpy as np

from .cart import GrowControls, RegressionTree, grow
from .dataset import FeatureTable
from .errors import ConfigurationError, InputDataError


def deep_tree_controls(min_leaf: int = 5) -> GrowControls:
    """Forest member trees: grown deep, never pruned."""
    return GrowControls(min_split=2 * min_leaf, min_leaf=min_leaf, cp=0.0)


@dataclass
class ForestModel:
    trees: list[RegressionTree]
    bags: list[np.ndarray]
    mtry: int
    seed: int
    bootstrap: bool
    controls: GrowControls
    columns: tuple[str, ...]

    @property
    def B(self) -> int:
        return len(self.trees)

    def predict(self, table: FeatureTable) -> np.ndarray:
        out = np.zeros(table.n)
        for tree in self.trees:  # fixed order keeps float sums reproducible
            out += tree.predict(table)
        return out / self.B

    def to_json(self) -> str:
        payload = {
            "model": "forest",
            "B": self.B,
            "mtry": self.mtry,
            "seed": self.seed,
            "bootstrap": self.bootstrap,
            "controls": asdict(self.controls),
            "columns": list(self.columns),
            "bags": [bag.tolist() for bag in self.bags],
            "trees": [tree.to_payload() for tree in self.trees],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        d = json.loads(text)
        return cls(
            trees=[RegressionTree.from_payload(p) for p in d["trees"]],
            bags=[np.asarray(bag, dtype=np.int64) for bag in d["bags"]],
            mtry=int(d["mtry"]),
            seed=int(d["seed"]),
            bootstrap=bool(d["bootstrap"]),
            controls=GrowControls(**d["controls"]),
            columns=tuple(d["columns"]),
        )


def _bag_table(train: FeatureTable, bag: np.ndarray) -> FeatureTable:
    # bootstrap rows repeat, so reindex with fresh ids; growth never reads ids
    return FeatureTable(
        np.arange(len(bag)),
        {name: train.column(name)[bag] for name in train.feature_names},
        train.require_outcome()[bag],
        train.outcome_name,
    )


def fit_forest(
    train: FeatureTable,
    B: int = 200,
    mtry: int | None = None,
    controls: GrowControls | None = None,
    seed: int = 0,
    bootstrap: bool = True,
) -> ForestModel:
    """Fit B trees on bootstrap bags, sampling mtry columns at each node.

    mtry defaults to max(1, floor(p/3)). Candidate columns are resampled
    per node and passed to the growth engine in ascending order so the
    single-tree tie-break (column declaration order) is preserved.
    """
    p = len(train.feature_names)
    n = train.n
    if p < 1:
        raise InputDataError("forest needs at least one feature column")
    if B < 1:
        raise ConfigurationError(f"B must be >= 1, got {B}")
    if mtry is None:
        mtry = max(1, p // 3)
    if not 1 <= mtry <= p:
        raise ConfigurationError(f"mtry={mtry} must be in [1, {p}]")
    controls = controls or deep_tree_controls()
    train.require_outcome()

    streams = np.random.SeedSequence(seed).spawn(B)
    trees: list[RegressionTree] = []
    bags: list[np.ndarray] = []
    col_universe = np.arange(p, dtype=np.int64)
    for b in range(B):
        rng = np.random.default_rng(streams[b])
        bag = rng.integers(0, n, n) if bootstrap else np.arange(n, dtype=np.int64)
        if mtry == p:
            sampler = None  # all columns at every node; no RNG consumed
        else:
            def sampler(rng=rng) -> np.ndarray:
                return np.sort(rng.choice(col_universe, size=mtry, replace=False))

        trees.append(grow(_bag_table(train, bag), controls, column_sampler=sampler))
        bags.append(bag)
    return ForestModel(
        trees=trees,
        bags=bags,
        mtry=mtry,
        seed=seed,
        bootstrap=bootstrap,
        controls=controls,
        columns=train.feature_names,
    )


def oob_predictions(model: ForestModel, train: FeatureTable) -> tuple[np.ndarray, np.ndarray]:
    """Out-of-bag prediction per row, plus the mask of rows that have one.

    A row's prediction averages only trees whose bag excludes it. Rows in
    every bag get a warning and are masked out.
    """
    n = train.n
    total = np.zeros(n)
    count = np.zeros(n, dtype=np.int64)
    for tree, bag in zip(model.trees, model.bags):
        oob = np.ones(n, dtype=bool)
        oob[bag] = False
        if not oob.any():
            continue
        preds = tree.predict(train.take(np.flatnonzero(oob)))
        total[oob] += preds
        count[oob] += 1
    covered = count > 0
    if not covered.any():
        raise InputDataError("no row is out of bag for any tree; cannot compute OOB error")
    if not covered.all():
        warnings.warn(
            f"{int((~covered).sum())} rows appear in every bag and are excluded from OOB error",
            stacklevel=2,
        )
    out = np.full(n, np.nan)
    out[covered] = total[covered] / count[covered]
    return out, covered


def oob_mse(model: ForestModel, train: FeatureTable) -> float:
    y = train.require_outcome()
    preds, covered = oob_predictions(model, train)
    d = y[covered] - preds[covered]
    return float(np.mean(d * d))
