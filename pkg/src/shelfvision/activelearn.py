"""Uncertainty-sampling loop and the learning-curve protocol.

Confidence of an unlabeled image is the absolute decision value of its
predicted class: the distance-to-hyperplane proxy.  Each protocol run
splits the test pool into a learning set (labels revealed batch by
batch) and a fixed testing set, retrains from scratch after every
reveal, and the curves average over runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classify import SvmModel, evaluate, predict_batch, train_ovr
from .dataset import Catalog, SplitSpec, split_for_learning

SELECTION_MODES = ("uncertainty", "margin", "random")


@dataclass
class LabelQuery:
    """One image queued for manual labeling."""

    image_ref: str
    predicted_class: int
    confidence: float
    status: str = "pending"        # pending | labeled | skipped
    label: int | None = None

    def mark_labeled(self, label: int, num_classes: int) -> None:
        if self.status != "pending":
            raise ValueError(f"query for {self.image_ref} already {self.status}")
        if not 0 <= label < num_classes:
            raise ValueError(f"label {label} out of range")
        self.status = "labeled"
        self.label = label

    def mark_skipped(self) -> None:
        if self.status != "pending":
            raise ValueError(f"query for {self.image_ref} already {self.status}")
        self.status = "skipped"


@dataclass
class LearningCurve:
    counts: list[int]
    means: list[float]
    stds: list[float]
    spec: SplitSpec
    per_run: list[list[float]] = field(default_factory=list)

    def to_csv(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("labeled_count,mean_accuracy,std_accuracy\n")
            for c, m, s in zip(self.counts, self.means, self.stds):
                fh.write(f"{c},{m!r},{s!r}\n")

    def to_json(self) -> str:
        return json.dumps({
            "points": [{"labeled": c, "mean": m, "std": s}
                       for c, m, s in zip(self.counts, self.means, self.stds)],
            "spec": {"learning_size": self.spec.learning_size,
                     "testing_size": self.spec.testing_size,
                     "step": self.spec.step, "runs": self.spec.runs,
                     "seed": self.spec.seed},
        }, indent=1)


def confidences(model: SvmModel, pool: np.ndarray,
                mode: str = "uncertainty") -> np.ndarray:
    """Per-item confidence; smaller means more informative to label."""
    values = model.decision_values(pool)
    if mode == "uncertainty":
        return np.abs(values.max(axis=1))
    if mode == "margin":
        part = np.partition(values, -2, axis=1)
        return part[:, -1] - part[:, -2]
    raise ValueError(f"unknown selection mode {mode!r}")


def select_uncertain(model: SvmModel, pool: np.ndarray, k: int,
                     refs: list[str] | None = None,
                     mode: str = "uncertainty") -> list:
    """The k pool items nearest the hyperplane, least confident first.

    Ties preserve pool order.  Returns refs when given, else indices.
    """
    if len(pool) == 0:
        raise ValueError("empty pool")
    if k > len(pool):
        raise ValueError(f"k={k} exceeds pool of {len(pool)}")
    conf = confidences(model, pool, mode)
    order = np.argsort(conf, kind="stable")[:k]
    if refs is not None:
        return [refs[int(i)] for i in order]
    return [int(i) for i in order]


def retrain(model: SvmModel, base_features: np.ndarray, base_labels: np.ndarray,
            new_features: np.ndarray | None = None,
            new_labels: np.ndarray | None = None) -> SvmModel:
    """Full retrain on base plus newly labeled data, same hyperparameters."""
    if new_features is None or len(new_features) == 0:
        X, y = base_features, base_labels
    else:
        new_labels = np.asarray(new_labels, dtype=np.int64)
        if new_labels.min() < 0 or new_labels.max() >= model.num_classes:
            raise ValueError("new label index out of range")
        X = np.vstack([base_features, new_features])
        y = np.concatenate([np.asarray(base_labels, dtype=np.int64), new_labels])
    return train_ovr(X, y, model.classes, C=model.C, kernel=model.kernel,
                     gamma=model.gamma, feature_mode=model.feature_mode,
                     vocab=model.vocab)


def run_protocol(catalog: Catalog, model: SvmModel,
                 base_features: np.ndarray, base_labels: np.ndarray,
                 pool_features: np.ndarray, spec: SplitSpec,
                 selection: str = "uncertainty") -> LearningCurve:
    """Learning curves over ``spec.runs`` random learning/testing splits.

    ``pool_features`` must align with ``catalog.test_images``.  Each run
    reveals ground truth in batches of ``spec.step`` (selected from the
    remaining learning pool by ``selection``), retrains, and evaluates on
    the fixed testing set; accuracies average across runs per count.
    """
    if selection not in SELECTION_MODES:
        raise ValueError(f"unknown selection mode {selection!r}")
    if len(pool_features) != len(catalog.test_images):
        raise ValueError("pool features must align with catalog test images")
    spec.validate(len(catalog.test_images))
    ref_to_idx = {ref: i for i, (ref, _) in enumerate(catalog.test_images)}
    pool_truth = np.array([c for _, c in catalog.test_images], dtype=np.int64)
    L = model.num_classes

    counts = list(range(0, spec.learning_size + 1, spec.step))
    if counts[-1] != spec.learning_size:
        counts.append(spec.learning_size)
    per_run: list[list[float]] = []
    for run in range(spec.runs):
        learn_refs, test_refs = split_for_learning(catalog, spec, run)
        assert not set(learn_refs) & set(test_refs), "split halves overlap"
        learn_idx = [ref_to_idx[r] for r in learn_refs]
        test_idx = np.array([ref_to_idx[r] for r in test_refs], dtype=np.int64)
        test_X = pool_features[test_idx]
        test_y = pool_truth[test_idx]

        rng = np.random.default_rng([spec.seed, run, 0xA11])
        current = model
        remaining = list(learn_idx)
        labeled: list[int] = []
        accs: list[float] = []
        preds, _ = predict_batch(current, test_X)
        accs.append(evaluate(preds, test_y, L).accuracy)
        for target in counts[1:]:
            k = target - len(labeled)
            if selection == "random":
                picks = [remaining[int(i)] for i in
                         rng.choice(len(remaining), size=k, replace=False)]
            else:
                sub = pool_features[np.array(remaining, dtype=np.int64)]
                picks = [remaining[i] for i in
                         select_uncertain(current, sub, k, mode=selection)]
            for p in picks:
                remaining.remove(p)
            labeled.extend(picks)
            assert len(labeled) == target, "label budget accounting broke"
            lab = np.array(labeled, dtype=np.int64)
            current = retrain(model, base_features, base_labels,
                              pool_features[lab], pool_truth[lab])
            preds, _ = predict_batch(current, test_X)
            accs.append(evaluate(preds, test_y, L).accuracy)
        per_run.append(accs)

    arr = np.array(per_run)
    return LearningCurve(counts=counts, means=[float(v) for v in arr.mean(axis=0)],
                         stds=[float(v) for v in arr.std(axis=0)],
                         spec=spec, per_run=per_run)
