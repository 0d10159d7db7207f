"""Cell x content popularity: ground-truth counts and regularized-SVD estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .trace import RequestLog

# a rise smaller than this (relative) is float noise at the SGD fixed point
DIVERGENCE_RTOL = 1e-9


class PopularityError(ValueError):
    pass


class TrainingError(RuntimeError):
    """SGD produced non-finite factors or a rising loss."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class RatingMatrix:
    """Sparse N x F matrix of positive ratings, entries kept sorted by (cell, content)."""

    def __init__(self, num_cells: int, num_contents: int, cells=(), contents=(), values=()):
        cells = np.asarray(cells, dtype=np.int64)
        contents = np.asarray(contents, dtype=np.int64)
        values = np.asarray(values, dtype=float)
        if not (cells.shape == contents.shape == values.shape):
            raise PopularityError("entry arrays differ in length")
        if len(cells):
            if cells.min() < 0 or cells.max() >= num_cells:
                raise PopularityError("cell index out of range")
            if contents.min() < 0 or contents.max() >= num_contents:
                raise PopularityError("content index out of range")
            if np.any(values <= 0):
                raise PopularityError("stored ratings must be > 0")
        order = np.lexsort((contents, cells))
        keys = cells[order] * num_contents + contents[order]
        if np.any(np.diff(keys) == 0):
            raise PopularityError("duplicate (cell, content) entry")
        self.num_cells = int(num_cells)
        self.num_contents = int(num_contents)
        self.cells = cells[order]
        self.contents = contents[order]
        self.values = values[order]
        for a in (self.cells, self.contents, self.values):
            a.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.num_cells, self.num_contents

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def keys(self) -> np.ndarray:
        return self.cells * self.num_contents + self.contents

    @property
    def entries(self) -> dict[tuple[int, int], float]:
        return {
            (n, f): v
            for n, f, v in zip(self.cells.tolist(), self.contents.tolist(), self.values.tolist())
        }

    @property
    def density(self) -> float:
        return self.nnz / (self.num_cells * self.num_contents)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.cells, self.contents] = self.values
        return out

    def subset(self, idx) -> "RatingMatrix":
        return RatingMatrix(self.num_cells, self.num_contents,
                            self.cells[idx], self.contents[idx], self.values[idx])

    def __eq__(self, other) -> bool:
        if not isinstance(other, RatingMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.cells, other.cells)
            and np.array_equal(self.contents, other.contents)
            and np.array_equal(self.values, other.values)
        )

    def write_csv(self, stream: TextIO) -> None:
        for n, f, v in zip(self.cells.tolist(), self.contents.tolist(), self.values.tolist()):
            stream.write(f"{n},{f},{v!r}\n")

    @classmethod
    def read_csv(cls, stream: TextIO, num_cells: int, num_contents: int) -> "RatingMatrix":
        cells, contents, values = [], [], []
        for line in stream:
            line = line.strip()
            if not line:
                continue
            n, f, v = line.split(",")
            cells.append(int(n))
            contents.append(int(f))
            values.append(float(v))
        return cls(num_cells, num_contents, cells, contents, values)


def build_rating_matrix(
    log: RequestLog, num_cells: int, num_contents: int, normalize: bool = False
) -> RatingMatrix:
    """Request counts per (cell, content).

    With ``normalize`` each cell's counts are divided by that cell's total,
    which leaves every per-cell ranking unchanged.
    """
    if not log.assigned:
        raise PopularityError("rating matrix needs a log assigned to cells")
    if len(log) == 0:
        return RatingMatrix(num_cells, num_contents)
    if log.cells.max() >= num_cells or log.contents.max() >= num_contents:
        raise PopularityError("log references cells or contents beyond the matrix shape")
    keys, counts = np.unique(log.cells * num_contents + log.contents, return_counts=True)
    cells, contents = np.divmod(keys, num_contents)
    values = counts.astype(float)
    if normalize:
        totals = np.bincount(cells, weights=values, minlength=num_cells)
        values = values / totals[cells]
    return RatingMatrix(num_cells, num_contents, cells, contents, values)


@dataclass(frozen=True)
class RatingSplit:
    train: RatingMatrix
    test: RatingMatrix
    train_fraction: float


def split_ratings(matrix: RatingMatrix, train_fraction: float, seed: int) -> RatingSplit:
    """Uniform random train subset of round(fraction * nnz) entries.

    The training set is a prefix of one seeded permutation, so splits drawn
    with the same seed are nested in ``train_fraction``.
    """
    if not 0 < train_fraction <= 1:
        raise PopularityError(f"train_fraction must be in (0, 1], got {train_fraction}")
    n_train = int(round(train_fraction * matrix.nnz))
    perm = np.random.default_rng(seed).permutation(matrix.nnz)
    return RatingSplit(
        train=matrix.subset(np.sort(perm[:n_train])),
        test=matrix.subset(np.sort(perm[n_train:])),
        train_fraction=train_fraction,
    )


@dataclass(frozen=True)
class CfHyperParams:
    rank: int = 16
    regularization: float = 0.02
    learning_rate: float = 0.005
    epochs: int = 100
    init_scale: float = 0.1
    seed: int = 0
    center: bool = True  # subtract the global mean before factorizing
    divergence_window: int = 10
    # stop once an epoch improves the loss by less than this fraction
    tolerance: float = 1e-10

    def validate(self) -> None:
        if self.rank < 1:
            raise PopularityError("rank must be >= 1")
        if self.regularization < 0:
            raise PopularityError("regularization must be >= 0")
        if not self.learning_rate > 0:
            raise PopularityError("learning_rate must be > 0")
        if self.epochs < 1:
            raise PopularityError("epochs must be >= 1")
        if not self.init_scale > 0:
            raise PopularityError("init_scale must be > 0")
        if self.tolerance < 0:
            raise PopularityError("tolerance must be >= 0")


@dataclass
class FactorModel:
    cell_factors: np.ndarray
    content_factors: np.ndarray
    global_mean: float
    rating_floor: float
    rating_ceiling: float
    loss_history: list = field(default_factory=list)

    FORMAT = "edgecache-factor-model"
    VERSION = 1

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.cell_factors), len(self.content_factors)

    @property
    def rank(self) -> int:
        return self.cell_factors.shape[1]

    def predict_all(self) -> np.ndarray:
        raw = self.global_mean + self.cell_factors @ self.content_factors.T
        return np.clip(raw, self.rating_floor, self.rating_ceiling)

    def save(self, stream: TextIO) -> None:
        """Text format: magic/version line, dimensions, scalars, row-major factors."""
        N, F = self.shape
        stream.write(f"{self.FORMAT} {self.VERSION}\n")
        stream.write(f"{N} {F} {self.rank}\n")
        stream.write(f"{self.global_mean!r} {self.rating_floor!r} {self.rating_ceiling!r}\n")
        for row in np.vstack([self.cell_factors, self.content_factors]):
            stream.write(" ".join(repr(float(x)) for x in row) + "\n")

    @classmethod
    def load(cls, stream: TextIO) -> "FactorModel":
        magic = stream.readline().split()
        if len(magic) != 2 or magic[0] != cls.FORMAT:
            raise PopularityError("not a factor model file")
        if int(magic[1]) != cls.VERSION:
            raise PopularityError(f"unsupported factor model version {magic[1]}")
        N, F, k = (int(x) for x in stream.readline().split())
        mean, lo, hi = (float(x) for x in stream.readline().split())
        rows = np.array([[float(x) for x in stream.readline().split()] for _ in range(N + F)])
        rows = rows.reshape(N + F, k)
        return cls(rows[:N].copy(), rows[N:].copy(), mean, lo, hi)


def _objective(train: RatingMatrix, U, V, mu, lam) -> float:
    """Squared error plus weight decay, both summed over observed entries."""
    u = U[train.cells]
    v = V[train.contents]
    err = train.values - mu - np.einsum("ij,ij->i", u, v)
    return float(err @ err + lam * (np.sum(u * u) + np.sum(v * v)))


def _conflict_free_batches(cells, contents, order) -> list[np.ndarray]:
    """Group a visiting order into batches touching distinct rows of U and V.

    Each entry lands one level after the latest earlier entry sharing its cell
    or content, so applying the batches in turn reproduces sequential SGD over
    ``order`` exactly: only commuting updates are ever reordered.
    """
    last_cell: dict[int, int] = {}
    last_content: dict[int, int] = {}
    level = np.empty(len(order), dtype=np.int64)
    for j, i in enumerate(order.tolist()):
        n, f = cells[i], contents[i]
        lv = max(last_cell.get(n, -1), last_content.get(f, -1)) + 1
        last_cell[n] = last_content[f] = lv
        level[j] = lv
    by_level = np.argsort(level, kind="stable")
    bounds = np.flatnonzero(np.diff(level[by_level])) + 1
    return np.split(order[by_level], bounds)


def train_reg_svd(train: RatingMatrix, hyper: CfHyperParams = CfHyperParams()) -> FactorModel:
    """Fit rating ~ mean + U[n] . V[f] by SGD with L2 weight decay.

    Each visit to entry (n, f) with error e updates
    ``U[n] <- (U[n] + lr*e*V[f]) / (1 + lr*lam)`` and likewise for ``V[f]``.

    One seeded permutation of the training entries fixes the visiting order
    for every epoch. The full regularized objective is recorded after each
    epoch in ``loss_history``; training stops early once an epoch improves
    it by less than ``tolerance`` (relative). Past that point fixed-step SGD
    only drifts toward its own fixed point, which is not the minimizer, and
    the objective can wobble at the 1e-11 level.
    """
    hyper.validate()
    if train.nnz == 0:
        raise PopularityError("cannot train on an empty rating matrix")
    rng = np.random.default_rng(hyper.seed)
    N, F = train.shape
    k = hyper.rank
    U = rng.uniform(-hyper.init_scale, hyper.init_scale, size=(N, k))
    V = rng.uniform(-hyper.init_scale, hyper.init_scale, size=(F, k))
    mu = float(train.values.mean()) if hyper.center else 0.0
    lr, lam = hyper.learning_rate, hyper.regularization
    # proximal form of the weight decay: stable for any lr * lam
    shrink = 1.0 / (1.0 + lr * lam)
    resid = train.values - mu
    batches = [
        (train.cells[b], train.contents[b], resid[b])
        for b in _conflict_free_batches(
            train.cells.tolist(), train.contents.tolist(), rng.permutation(train.nnz)
        )
    ]

    losses: list[float] = []
    rising = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(hyper.epochs):
            for n, f, r in batches:
                u = U[n]
                v = V[f]
                e = (r - np.einsum("ij,ij->i", u, v))[:, None]
                U[n] = (u + lr * e * v) * shrink
                V[f] = (v + lr * e * u) * shrink
            loss = _objective(train, U, V, mu, lam)
            if not (math.isfinite(loss) and np.isfinite(U).all() and np.isfinite(V).all()):
                raise TrainingError("non-finite factors", epoch)
            rising = rising + 1 if losses and loss > losses[-1] * (1 + DIVERGENCE_RTOL) else 0
            if rising >= hyper.divergence_window:
                raise TrainingError(f"loss rose for {rising} consecutive epochs", epoch)
            losses.append(loss)
            if len(losses) > 1 and losses[-2] - loss <= hyper.tolerance * losses[-2]:
                break
    if losses[-1] > losses[0]:
        raise TrainingError("final loss exceeds first-epoch loss", hyper.epochs - 1)
    return FactorModel(U, V, mu, float(train.values.min()), float(train.values.max()), losses)


def predict_rating(model: FactorModel, cell: int, content: int) -> float:
    N, F = model.shape
    if not (0 <= cell < N and 0 <= content < F):
        raise IndexError(f"({cell}, {content}) outside a {N}x{F} model")
    raw = model.global_mean + float(model.cell_factors[cell] @ model.content_factors[content])
    return min(max(raw, model.rating_floor), model.rating_ceiling)


def estimate_popularity(model: FactorModel, ground: RatingMatrix, split: RatingSplit) -> np.ndarray:
    """Dense N x F popularity: training ratings pass through, the rest are predicted."""
    if model.shape != ground.shape or split.train.shape != ground.shape:
        raise PopularityError("model, ground truth and split shapes disagree")
    est = model.predict_all()
    est[split.train.cells, split.train.contents] = split.train.values
    return est


RATING_TRANSFORMS = ("none", "log1p")


def transform_ratings(matrix: RatingMatrix, kind: str) -> RatingMatrix:
    """Monotone transform of the stored ratings (counts stay positive under log1p)."""
    if kind == "none":
        return matrix
    if kind == "log1p":
        return RatingMatrix(matrix.num_cells, matrix.num_contents,
                            matrix.cells, matrix.contents, np.log1p(matrix.values))
    raise PopularityError(f"unknown rating transform {kind!r}")


def inverse_transform(values: np.ndarray, kind: str) -> np.ndarray:
    if kind == "none":
        return np.asarray(values, dtype=float)
    if kind == "log1p":
        return np.expm1(values)
    raise PopularityError(f"unknown rating transform {kind!r}")


def known_first_scores(estimate: np.ndarray, known: RatingMatrix) -> np.ndarray:
    """Ranking scores that put every known rating above every predicted one.

    Order within each tier is preserved, so a rank-based placement caches
    trusted contents before speculative ones.
    """
    scores = np.array(estimate, dtype=float)
    if known.nnz:
        lift = float(np.max(np.abs(scores))) + 1.0
        scores[known.cells, known.contents] = known.values + lift
    return scores


def rating_rmse(model: FactorModel, test: RatingMatrix) -> float:
    if test.nnz == 0:
        raise PopularityError("RMSE over an empty test set")
    raw = model.global_mean + np.einsum(
        "ij,ij->i", model.cell_factors[test.cells], model.content_factors[test.contents]
    )
    pred = np.clip(raw, model.rating_floor, model.rating_ceiling)
    return float(np.sqrt(np.mean((pred - test.values) ** 2)))
