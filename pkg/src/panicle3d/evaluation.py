"""Linear fits of predicted counts to ground truth and repeated-split RMSE."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_fraction, check_int, check_xy


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    r_squared: float
    n: int

    def predict(self, x):
        return self.slope * np.asarray(x, dtype=np.float64) + self.intercept

    def to_dict(self):
        return {"slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared, "n": self.n}


@dataclass(frozen=True)
class KFoldReport:
    k: int
    train_fraction: float
    fold_rmse: tuple
    mean_rmse: float

    def to_dict(self):
        return {
            "k": self.k,
            "train_fraction": self.train_fraction,
            "test_fraction": 1.0 - self.train_fraction,
            "fold_rmse": list(self.fold_rmse),
            "mean_rmse": self.mean_rmse,
        }


def _ols(x, y):
    if len(x) < 2:
        raise EvaluationError(f"a linear fit needs at least 2 samples, got {len(x)}")
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0.0:
        raise EvaluationError("x is constant; the slope is undefined")
    slope = float(np.sum((x - xm) * (y - ym))) / sxx
    return slope, float(ym - slope * xm)


def linear_fit(x, y) -> FitResult:
    """Ordinary least squares ``y ≈ slope * x + intercept`` with its R².

    Raises ``EvaluationError`` for constant ``x`` or constant ``y`` (R² undefined).
    """
    x, y = check_xy(x, y)
    slope, intercept = _ols(x, y)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise EvaluationError("y is constant (SS_tot = 0); R² is undefined")
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    r2 = min(max(1.0 - ss_res / ss_tot, 0.0), 1.0)
    return FitResult(slope, intercept, r2, len(x))


def kfold_rmse(x, y, k=10, train_fraction=0.75, rng=0) -> KFoldReport:
    """Mean test RMSE over ``k`` independent random train/test splits.

    Each split trains on ``round(train_fraction * n)`` samples and tests on
    the rest; with ``train_fraction == 1`` the test set is the full sample.
    """
    x, y = check_xy(x, y)
    k = check_int(k, "k", minimum=1)
    train_fraction = check_fraction(train_fraction, "train_fraction")
    n = len(x)
    n_train = int(round(train_fraction * n))
    full = train_fraction == 1.0
    if n_train < 2 or (not full and n - n_train < 1):
        raise EvaluationError(
            f"{n} samples cannot give a {train_fraction:.2f} split with >= 2 train and >= 1 test samples"
        )
    gen = np.random.default_rng(rng)
    rmses = []
    for _ in range(k):
        perm = gen.permutation(n)
        train = perm[:n_train]
        test = perm if full else perm[n_train:]
        slope, intercept = _ols(x[train], y[train])
        resid = y[test] - (slope * x[test] + intercept)
        rmses.append(math.sqrt(float(np.mean(resid**2))))
    return KFoldReport(k, train_fraction, tuple(rmses), math.fsum(rmses) / k)


def extrapolate_2d_count(frame, fit: FitResult) -> float:
    """Whole-panicle estimate from one view's detection count."""
    n = frame if isinstance(frame, (int, np.integer)) else frame.n_detections
    return float(fit.predict(n))


def read_count_csv(path):
    """``(prediction, ground_truth)`` columns of a CSV file as two arrays."""
    preds, truth = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"prediction", "ground_truth"} - set(reader.fieldnames or ())
        if missing:
            raise EvaluationError(f"{path}: missing column(s) {sorted(missing)}")
        for row in reader:
            preds.append(float(row["prediction"]))
            truth.append(float(row["ground_truth"]))
    return np.asarray(preds), np.asarray(truth)


class CountRegressor(RegressorMixin, BaseEstimator):
    """Linear map from predicted counts to ground truth (counts or weight)."""

    def fit(self, X, y):
        x = np.asarray(X, dtype=np.float64).reshape(len(y), -1)
        if x.shape[1] != 1:
            raise ValueError(f"CountRegressor takes a single feature, got {x.shape[1]}")
        self.fit_ = linear_fit(x[:, 0], y)
        self.coef_ = np.array([self.fit_.slope])
        self.intercept_ = self.fit_.intercept
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        x = np.asarray(X, dtype=np.float64).reshape(-1)
        return self.fit_.predict(x)
