"""Linear probing on frozen features and group-fairness metrics.

This is the only part of the pipeline that may look at group labels. The
probe is a multinomial logistic regression solved by full-batch gradient
descent with backtracking; the objective is convex, so the solver always
lands on the same optimum regardless of initialization. All metrics are
reported in percentage points.

Conventions worth calling out because they differ across the literature:
the equalized-odds difference is the larger of the across-group TPR gap and
FPR gap; the degree of bias is the population (not sample) standard
deviation of the per-group accuracies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError

_GD_MAX_ITER = 20000
_GD_TOL = 1e-6


@dataclass
class ProbeModel:
    """Affine classifier trained on frozen features."""

    weight: np.ndarray  # (classes, features)
    bias: np.ndarray  # (classes,)
    final_loss: float = float("nan")
    grad_norm: float = float("nan")
    iterations: int = 0

    def logits(self, features: np.ndarray) -> np.ndarray:
        return np.atleast_2d(np.asarray(features, dtype=np.float64)) @ self.weight.T + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)


def _objective(W, b, X, y, l2):
    logits = X @ W.T + b
    shift = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - shift)
    denom = ex.sum(axis=1, keepdims=True)
    log_probs = (logits - shift) - np.log(denom)
    n = X.shape[0]
    loss = float(-log_probs[np.arange(n), y].mean() + 0.5 * l2 * np.sum(W * W))
    d = ex / denom
    d[np.arange(n), y] -= 1.0
    d /= n
    gW = d.T @ X + l2 * W
    gb = d.sum(axis=0)
    return loss, gW, gb


def train_probe(
    features: np.ndarray,
    labels: np.ndarray,
    l2: float = 1e-4,
    seed: int = 0,
    max_iter: int = _GD_MAX_ITER,
    tol: float = _GD_TOL,
) -> ProbeModel:
    """Fit a regularized logistic-regression probe on frozen features.

    Runs gradient descent with an Armijo backtracking line search until the
    gradient norm drops below ``tol`` or the iteration cap is hit. The seed
    only randomizes the starting point; convexity makes the result
    effectively unique.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.shape[0] != X.shape[0]:
        raise DataError("labels do not match the feature row count")
    classes = np.unique(y)
    if classes.size < 2:
        raise DataError("probe training needs at least two classes")
    n_classes = int(classes.max()) + 1
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x70726F62]))
    W = 0.01 * rng.standard_normal((n_classes, X.shape[1]))
    b = np.zeros(n_classes)

    loss, gW, gb = _objective(W, b, X, y, l2)
    step = 1.0
    iterations = 0
    for iterations in range(1, max_iter + 1):
        gnorm = float(np.sqrt(np.sum(gW * gW) + np.sum(gb * gb)))
        if gnorm <= tol:
            break
        # Armijo backtracking on the full-batch objective
        accepted = False
        for _ in range(60):
            W_new = W - step * gW
            b_new = b - step * gb
            new_loss, gW_new, gb_new = _objective(W_new, b_new, X, y, l2)
            if new_loss <= loss - 0.5 * step * gnorm * gnorm:
                W, b, loss, gW, gb = W_new, b_new, new_loss, gW_new, gb_new
                step *= 2.0
                accepted = True
                break
            step *= 0.5
        if not accepted:
            raise NumericError("probe line search stalled; objective may be ill-conditioned")
    gnorm = float(np.sqrt(np.sum(gW * gW) + np.sum(gb * gb)))
    return ProbeModel(W, b, final_loss=loss, grad_norm=gnorm, iterations=iterations)


def _as_arrays(*arrays) -> list[np.ndarray]:
    out = [np.asarray(a).ravel() for a in arrays]
    lengths = {a.shape[0] for a in out}
    if len(lengths) != 1:
        raise DataError(f"inputs must have equal length, got {sorted(lengths)}")
    return out


def group_accuracy(predictions, labels, groups) -> dict:
    """Per-group percent correct."""
    pred, lab, grp = _as_arrays(predictions, labels, groups)
    result = {}
    for g in np.unique(grp):
        mask = grp == g
        if not mask.any():
            raise DataError(f"group {_plain(g)!r} is empty")
        result[_plain(g)] = float(100.0 * np.mean(pred[mask] == lab[mask]))
    return result


def degree_of_bias(per_group_acc) -> float:
    """Population standard deviation of the per-group accuracies."""
    values = np.asarray(list(per_group_acc.values()) if isinstance(per_group_acc, dict) else per_group_acc, dtype=np.float64)
    if values.size < 2:
        raise DataError("degree of bias needs at least two groups")
    return float(np.std(values))


def selection_rate(per_group_acc) -> float:
    """100 * (worst group accuracy / best group accuracy)."""
    values = np.asarray(list(per_group_acc.values()) if isinstance(per_group_acc, dict) else per_group_acc, dtype=np.float64)
    top = float(values.max())
    if top <= 0:
        raise DataError("selection rate undefined when the best group accuracy is 0")
    return float(100.0 * values.min() / top)


def _plain(g):
    return g.item() if hasattr(g, "item") else g


def _rates_by_group(pred, lab, grp) -> tuple[dict, dict]:
    tpr = {}
    fpr = {}
    for g in np.unique(grp):
        mask = grp == g
        pos = mask & (lab == 1)
        neg = mask & (lab == 0)
        if not pos.any():
            raise DataError(f"group {_plain(g)!r} has no positive samples; TPR undefined")
        if not neg.any():
            raise DataError(f"group {_plain(g)!r} has no negative samples; FPR undefined")
        tpr[g] = float(np.mean(pred[pos] == 1))
        fpr[g] = float(np.mean(pred[neg] == 1))
    return tpr, fpr


def equalized_odds_difference(predictions, labels, groups) -> float:
    """Largest across-group gap in either TPR or FPR, in points."""
    pred, lab, grp = _as_arrays(predictions, labels, groups)
    bad = set(np.unique(lab)) | set(np.unique(pred))
    if not bad <= {0, 1}:
        raise DataError(f"equalized odds is defined for binary tasks, got values {sorted(bad)}")
    tpr, fpr = _rates_by_group(pred, lab, grp)
    tpr_gap = max(tpr.values()) - min(tpr.values())
    fpr_gap = max(fpr.values()) - min(fpr.values())
    return float(100.0 * max(tpr_gap, fpr_gap))


def demographic_parity_difference(predictions, groups) -> float:
    """Largest across-group gap in the positive-prediction rate, in points."""
    pred, grp = _as_arrays(predictions, groups)
    if not set(np.unique(pred)) <= {0, 1}:
        raise DataError("demographic parity is defined for binary predictions")
    rates = []
    for g in np.unique(grp):
        mask = grp == g
        if not mask.any():
            raise DataError(f"group {g!r} is empty")
        rates.append(float(np.mean(pred[mask] == 1)))
    return float(100.0 * (max(rates) - min(rates)))


@dataclass
class FairnessReport:
    """All accuracy and fairness numbers for one probe task, in points."""

    avg_acc: float
    per_group_acc: dict
    group_mean_acc: float
    std_acc: float
    ser: float
    eod: float
    dpd: float
    min_grp_acc: float
    max_grp_acc: float

    def to_dict(self) -> dict:
        return {
            "avg_acc": self.avg_acc,
            "per_group_acc": {str(k): v for k, v in self.per_group_acc.items()},
            "group_mean_acc": self.group_mean_acc,
            "std_acc": self.std_acc,
            "ser": self.ser,
            "eod": self.eod,
            "dpd": self.dpd,
            "min_grp_acc": self.min_grp_acc,
            "max_grp_acc": self.max_grp_acc,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_text_table(self) -> str:
        headers = ["Avg. Acc", "STD", "SeR", "EOD", "DPD", "Min Grp Acc", "Max Grp Acc"]
        values = [
            self.avg_acc, self.std_acc, self.ser, self.eod, self.dpd,
            self.min_grp_acc, self.max_grp_acc,
        ]
        cells = [f"{v:.2f}" for v in values]
        widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
        header = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
        row = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return header + "\n" + row


def build_report(predictions, labels, groups) -> FairnessReport:
    """Assemble every metric for one prediction set.

    ``avg_acc`` is the overall accuracy over all samples; the unweighted mean
    of the group accuracies is reported alongside for comparison.
    """
    pred, lab, grp = _as_arrays(predictions, labels, groups)
    per_group = group_accuracy(pred, lab, grp)
    accs = np.asarray(list(per_group.values()))
    return FairnessReport(
        avg_acc=float(100.0 * np.mean(pred == lab)),
        per_group_acc=per_group,
        group_mean_acc=float(accs.mean()),
        std_acc=degree_of_bias(per_group),
        ser=selection_rate(per_group),
        eod=equalized_odds_difference(pred, lab, grp),
        dpd=demographic_parity_difference(pred, grp),
        min_grp_acc=float(accs.min()),
        max_grp_acc=float(accs.max()),
    )
