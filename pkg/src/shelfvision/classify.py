"""1-vs-all SVM training, prediction, evaluation, and the BoW baseline.

The final classifier follows the published hyperparameters: RBF kernel
with C = 2048 and width 2 (a linear kernel stays selectable by config;
mining-time patch detectors are always linear).  Features are
standardized per dimension from training statistics, which travel with
the model.

Model parameters are held as little-endian float32 so the versioned
binary serialization round-trips bit-exactly; decision values are then
accumulated in float64, making scores reproducible across save/load.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from sklearn.svm import SVC

from .kmeans import assign, kmeans

MODEL_MAGIC = b"SVSM"
MODEL_VERSION = 1

KERNELS = ("linear", "rbf")
FEATURE_MODES = ("whole", "pyramid", "bow")

DEFAULT_C = 2048.0
DEFAULT_GAMMA = 2.0

BOW_VOCAB_SIZE = 200
BOW_DESC_DIM = 128


@dataclass(frozen=True)
class ClassDecision:
    """One 1-vs-rest decision function over standardized features."""

    intercept: float
    weights: np.ndarray | None = None        # linear kernel
    support: np.ndarray | None = None        # rbf kernel, (n_sv, dim)
    dual_coef: np.ndarray | None = None      # rbf kernel, (n_sv,)


@dataclass
class SvmModel:
    kernel: str
    C: float
    gamma: float
    classes: list[str]
    feature_mode: str
    mean: np.ndarray
    std: np.ndarray
    decisions: list[ClassDecision]
    vocab: np.ndarray | None = None          # BoW vocabulary, (words, 128)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def standardize(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return (X - self.mean.astype(np.float64)) / self.std.astype(np.float64)

    def decision_values(self, X: np.ndarray) -> np.ndarray:
        """Per-class decision values, shape (n, L), float64."""
        Xs = self.standardize(X)
        if Xs.shape[1] != self.dim:
            raise ValueError(f"feature length {Xs.shape[1]} does not match "
                             f"model dimension {self.dim}")
        out = np.empty((len(Xs), self.num_classes), dtype=np.float64)
        for c, dec in enumerate(self.decisions):
            if self.kernel == "linear":
                out[:, c] = Xs @ dec.weights.astype(np.float64) + dec.intercept
            else:
                sv = dec.support.astype(np.float64)
                d2 = ((Xs ** 2).sum(axis=1)[:, None] - 2.0 * Xs @ sv.T
                      + (sv ** 2).sum(axis=1)[None, :])
                k = np.exp(-self.gamma * np.maximum(d2, 0.0))
                out[:, c] = k @ dec.dual_coef.astype(np.float64) + dec.intercept
        return out


def train_ovr(features: np.ndarray, labels: np.ndarray, classes: list[str],
              C: float = DEFAULT_C, kernel: str = "rbf",
              gamma: float = DEFAULT_GAMMA, feature_mode: str = "whole",
              vocab: np.ndarray | None = None) -> SvmModel:
    """Train L one-vs-rest SVMs on standardized features.

    Each class's function is trained with that class positive and every
    other sample negative.  A class with zero positives aborts with an
    error naming it.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}")
    if feature_mode not in FEATURE_MODES:
        raise ValueError(f"unknown feature mode {feature_mode!r}")
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("features must be (n, dim) with matching labels")
    present = set(int(v) for v in np.unique(y))
    if len(present) < 2:
        raise ValueError("need at least 2 classes present in labels")
    for c, name in enumerate(classes):
        if c not in present:
            raise ValueError(f"class {name!r} has zero training examples")

    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0.0] = 1.0
    mean32 = mean.astype(np.float32)
    std32 = std.astype(np.float32)
    Xs = (X - mean32.astype(np.float64)) / std32.astype(np.float64)

    decisions: list[ClassDecision] = []
    for c in range(len(classes)):
        yc = np.where(y == c, 1.0, -1.0)
        svc = SVC(C=C, kernel=kernel, gamma=gamma, tol=1e-5, cache_size=256)
        svc.fit(Xs, yc)
        # libsvm orders binary classes [-1, +1]; decision_function scores +1
        if kernel == "linear":
            w = (svc.dual_coef_[0] @ svc.support_vectors_).astype(np.float32)
            decisions.append(ClassDecision(
                intercept=float(np.float32(svc.intercept_[0])), weights=w))
        else:
            decisions.append(ClassDecision(
                intercept=float(np.float32(svc.intercept_[0])),
                support=svc.support_vectors_.astype(np.float32),
                dual_coef=svc.dual_coef_[0].astype(np.float32)))
    return SvmModel(kernel=kernel, C=float(C), gamma=float(gamma),
                    classes=list(classes), feature_mode=feature_mode,
                    mean=mean32, std=std32, decisions=decisions,
                    vocab=None if vocab is None else vocab.astype(np.float32))


def predict(model: SvmModel, feature: np.ndarray) -> tuple[int, float]:
    """argmax class and its decision value; ties break low."""
    values = model.decision_values(np.atleast_2d(feature))[0]
    c = int(values.argmax())
    return c, float(values[c])


def predict_batch(model: SvmModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    values = model.decision_values(X)
    preds = values.argmax(axis=1)
    return preds, values[np.arange(len(values)), preds]


def predict_thresholded(model: SvmModel, feature: np.ndarray,
                        tau: float) -> int | None:
    """Class index when the decision score clears ``tau``, else None.

    None is the "no notification" outcome for background-only or
    out-of-catalog images.
    """
    c, score = predict(model, feature)
    return c if score > tau else None


@dataclass
class EvalReport:
    """Per-class correctness counts and the balanced accuracy of Eq.-style
    mean-over-classes scoring, plus a row-normalized confusion matrix."""

    correct: np.ndarray            # k_i, (L,)
    totals: np.ndarray             # n_i, (L,)
    accuracy: float
    confusion: np.ndarray          # (L, L), rows = truth, row-normalized
    skipped_classes: list[int] = field(default_factory=list)

    def to_json(self, classes: list[str] | None = None) -> str:
        L = len(self.totals)
        names = classes if classes is not None else [str(i) for i in range(L)]
        payload = {
            "accuracy": self.accuracy,
            "per_class": [
                {"class": names[i], "correct": int(self.correct[i]),
                 "total": int(self.totals[i]),
                 "accuracy": (float(self.correct[i] / self.totals[i])
                              if self.totals[i] else None)}
                for i in range(L)
            ],
            "skipped_classes": [names[i] for i in self.skipped_classes],
            "confusion": self.confusion.tolist(),
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    def confusion_csv(self, path: Path | str,
                      classes: list[str] | None = None) -> None:
        L = len(self.totals)
        names = classes if classes is not None else [str(i) for i in range(L)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("truth\\prediction," + ",".join(names) + "\n")
            for i in range(L):
                row = ",".join(repr(float(v)) for v in self.confusion[i])
                fh.write(f"{names[i]},{row}\n")


def evaluate(predictions: np.ndarray, truth: np.ndarray, num_classes: int
             ) -> EvalReport:
    """Mean per-class accuracy: (1/L) sum of k_i / n_i.

    Classes absent from the truth are excluded from the mean and listed
    in ``skipped_classes``.
    """
    preds = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truth, dtype=np.int64)
    if len(preds) == 0 or len(preds) != len(truths):
        raise ValueError("predictions and truth must be equal-length, non-empty")
    if preds.max() >= num_classes or truths.max() >= num_classes:
        raise ValueError("class index out of range")
    L = num_classes
    totals = np.bincount(truths, minlength=L).astype(np.int64)
    correct = np.bincount(truths[preds == truths], minlength=L).astype(np.int64)
    confusion = np.zeros((L, L), dtype=np.float64)
    np.add.at(confusion, (truths, preds), 1.0)
    skipped = [int(i) for i in np.flatnonzero(totals == 0)]
    live = totals > 0
    confusion[live] /= totals[live, None]
    accuracy = float((correct[live] / totals[live]).mean())
    return EvalReport(correct=correct, totals=totals, accuracy=accuracy,
                      confusion=confusion, skipped_classes=skipped)


def pr_curve(model: SvmModel, features: np.ndarray, truth: np.ndarray,
             taus: np.ndarray) -> list[tuple[float, float, float]]:
    """(tau, precision, recall) sweep over an ascending threshold grid.

    At each tau only images whose top score clears tau are attempted;
    precision over attempted images (1.0 when none are attempted, by
    convention) and recall over all images.
    """
    taus = np.asarray(taus, dtype=np.float64)
    if len(truth) == 0:
        raise ValueError("empty test set")
    if np.any(np.diff(taus) < 0):
        raise ValueError("tau grid must be sorted ascending")
    preds, scores = predict_batch(model, features)
    truths = np.asarray(truth, dtype=np.int64)
    total = len(truths)
    out = []
    for tau in taus:
        attempted = scores > tau
        n_att = int(attempted.sum())
        n_corr = int((attempted & (preds == truths)).sum())
        precision = n_corr / n_att if n_att else 1.0
        recall = n_corr / total
        out.append((float(tau), float(precision), float(recall)))
    return out


# ---------------------------------------------------------------------------
# Bag-of-words baseline
# ---------------------------------------------------------------------------

def _gray_u8(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_RGB2GRAY)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    return arr


def local_descriptors(image: np.ndarray) -> np.ndarray:
    """128-d gradient-histogram descriptors at blob-like interest points."""
    sift = cv2.SIFT_create(contrastThreshold=0.02)
    _, desc = sift.detectAndCompute(_gray_u8(image), None)
    if desc is None:
        return np.zeros((0, BOW_DESC_DIM), dtype=np.float32)
    return desc.astype(np.float32)


def bow_encode(image: np.ndarray, vocab: np.ndarray) -> np.ndarray:
    """Normalized word histogram of an image; sums to 1.

    An image yielding no descriptors maps to the uniform histogram, the
    least-informative unit-mass vector.
    """
    desc = local_descriptors(image)
    k = len(vocab)
    if len(desc) == 0:
        return np.full(k, 1.0 / k, dtype=np.float64)
    words = assign(desc, vocab)
    hist = np.bincount(words, minlength=k).astype(np.float64)
    return hist / hist.sum()


def bow_baseline_train(images: list[np.ndarray], labels: np.ndarray,
                       classes: list[str], vocab_size: int = BOW_VOCAB_SIZE,
                       seed: int = 0, C: float = DEFAULT_C,
                       kernel: str = "rbf", gamma: float = DEFAULT_GAMMA
                       ) -> tuple[np.ndarray, SvmModel]:
    """Baseline: local descriptors, k-means vocabulary, histogram + SVM."""
    all_desc = []
    for img in images:
        d = local_descriptors(img)
        if len(d):
            all_desc.append(d)
    if not all_desc:
        raise ValueError("no local descriptors found in training images")
    stacked = np.vstack(all_desc)
    if len(stacked) < vocab_size:
        raise ValueError(f"only {len(stacked)} descriptors for a "
                         f"{vocab_size}-word vocabulary")
    vocab, _ = kmeans(stacked, vocab_size, seed)
    vocab = vocab.astype(np.float32)
    X = np.stack([bow_encode(img, vocab) for img in images])
    model = train_ovr(X, labels, classes, C=C, kernel=kernel, gamma=gamma,
                      feature_mode="bow")
    model.vocab = vocab
    return vocab, model


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_model(model: SvmModel, path: Path | str) -> None:
    """Versioned little-endian binary; round-trips bit-exactly."""
    with open(path, "wb") as fh:
        write_model(fh, model)


def model_bytes(model: SvmModel) -> bytes:
    import io
    buf = io.BytesIO()
    write_model(buf, model)
    return buf.getvalue()


def write_model(fh, model: SvmModel) -> None:
    fh.write(MODEL_MAGIC)
    fh.write(struct.pack("<I", MODEL_VERSION))
    fh.write(struct.pack("<BB", KERNELS.index(model.kernel),
                         FEATURE_MODES.index(model.feature_mode)))
    fh.write(struct.pack("<IIff", model.num_classes, model.dim,
                         model.C, model.gamma))
    for name in model.classes:
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
    fh.write(model.mean.astype("<f4").tobytes())
    fh.write(model.std.astype("<f4").tobytes())
    if model.vocab is None:
        fh.write(struct.pack("<B", 0))
    else:
        fh.write(struct.pack("<BII", 1, *model.vocab.shape))
        fh.write(model.vocab.astype("<f4").tobytes())
    for dec in model.decisions:
        if model.kernel == "linear":
            fh.write(struct.pack("<f", dec.intercept))
            fh.write(dec.weights.astype("<f4").tobytes())
        else:
            fh.write(struct.pack("<If", len(dec.dual_coef), dec.intercept))
            fh.write(dec.dual_coef.astype("<f4").tobytes())
            fh.write(dec.support.astype("<f4").tobytes())


def load_model(path: Path | str) -> SvmModel:
    with open(path, "rb") as fh:
        if fh.read(4) != MODEL_MAGIC:
            raise ValueError(f"not a model file: {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != MODEL_VERSION:
            raise ValueError(f"unsupported model version {version}")
        k_idx, m_idx = struct.unpack("<BB", fh.read(2))
        L, dim, C, gamma = struct.unpack("<IIff", fh.read(16))
        classes = []
        for _ in range(L):
            (n,) = struct.unpack("<H", fh.read(2))
            classes.append(fh.read(n).decode("utf-8"))
        mean = np.frombuffer(fh.read(4 * dim), dtype="<f4").copy()
        std = np.frombuffer(fh.read(4 * dim), dtype="<f4").copy()
        (has_vocab,) = struct.unpack("<B", fh.read(1))
        vocab = None
        if has_vocab:
            vr, vc = struct.unpack("<II", fh.read(8))
            vocab = np.frombuffer(fh.read(4 * vr * vc),
                                  dtype="<f4").reshape(vr, vc).copy()
        decisions = []
        kernel = KERNELS[k_idx]
        for _ in range(L):
            if kernel == "linear":
                (intercept,) = struct.unpack("<f", fh.read(4))
                w = np.frombuffer(fh.read(4 * dim), dtype="<f4").copy()
                decisions.append(ClassDecision(intercept=intercept, weights=w))
            else:
                n_sv, intercept = struct.unpack("<If", fh.read(8))
                dual = np.frombuffer(fh.read(4 * n_sv), dtype="<f4").copy()
                sv = np.frombuffer(fh.read(4 * n_sv * dim),
                                   dtype="<f4").reshape(n_sv, dim).copy()
                decisions.append(ClassDecision(intercept=intercept,
                                               dual_coef=dual, support=sv))
    return SvmModel(kernel=kernel, C=C, gamma=gamma, classes=classes,
                    feature_mode=FEATURE_MODES[m_idx], mean=mean, std=std,
                    decisions=decisions, vocab=vocab)
