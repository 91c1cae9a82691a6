"""Weak-supervision data model: label matrices, feature/gold files, splits, synthetic corpora.

Votes use the external coding ``-1`` (abstain) and ``1..C`` (classes). The vote-row
index used to address the label-model tensor is ``0`` for abstain and ``c`` for
class ``c``; see :func:`vote_rows`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .exceptions import DomainError, ParseError, ShapeError

ABSTAIN = -1
PathLike = Union[str, Path]


def vote_rows(votes: np.ndarray) -> np.ndarray:
    """Map external votes to row indices of the (C+1) vote axis."""
    votes = np.asarray(votes)
    return np.where(votes < 0, 0, votes).astype(np.intp)


def check_votes(votes, n_classes: int) -> np.ndarray:
    """Validate a vote grid and return it as a 2-d int array."""
    if n_classes is None or int(n_classes) < 2:
        raise DomainError(f"number of classes must be >= 2, got {n_classes}")
    arr = np.asarray(votes)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"label matrix must be a non-empty N x M grid, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise DomainError("label matrix entries must be integers")
        arr = arr.astype(np.int64)
    bad = (arr != ABSTAIN) & ((arr < 1) | (arr > n_classes))
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise DomainError(
            f"vote {arr[i, j]} at row {i + 1}, col {j + 1} is outside {{-1}} U [1, {n_classes}]"
        )
    return arr.astype(np.int64, copy=False)


def check_features(X, n_rows: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"feature matrix must be a non-empty N x d grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("feature matrix contains NaN or Inf")
    if n_rows is not None and arr.shape[0] != n_rows:
        raise ShapeError(f"feature matrix has {arr.shape[0]} rows, expected {n_rows}")
    return arr


def check_gold(y, n_classes: int, n_rows: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1 or arr.size < 1:
        raise ShapeError(f"gold labels must be a non-empty vector, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if np.any(arr != np.round(arr)):
            raise DomainError("gold labels must be integers")
        arr = arr.astype(np.int64)
    if np.any((arr < 1) | (arr > n_classes)):
        raise DomainError(f"gold labels must lie in [1, {n_classes}]")
    if n_rows is not None and arr.shape[0] != n_rows:
        raise ShapeError(f"gold labels have {arr.shape[0]} rows, expected {n_rows}")
    return arr.astype(np.int64, copy=False)


@dataclass(frozen=True)
class LabelMatrix:
    """N x M grid of LF votes with its class count."""

    votes: np.ndarray
    n_classes: int

    def __post_init__(self):
        v = check_votes(self.votes, self.n_classes)
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "votes", v)
        object.__setattr__(self, "n_classes", int(self.n_classes))

    @property
    def shape(self):
        return self.votes.shape

    @property
    def n_lfs(self) -> int:
        return self.votes.shape[1]

    @property
    def rows(self) -> np.ndarray:
        return vote_rows(self.votes)

    def __len__(self):
        return self.votes.shape[0]

    def __eq__(self, other):
        if not isinstance(other, LabelMatrix):
            return NotImplemented
        return self.n_classes == other.n_classes and np.array_equal(self.votes, other.votes)

    __hash__ = None


@dataclass(frozen=True)
class Split:
    X: np.ndarray
    y: Optional[np.ndarray] = None
    L: Optional[LabelMatrix] = None

    def __len__(self):
        return self.X.shape[0]


@dataclass(frozen=True)
class DatasetBundle:
    """Train split with votes, gold-labelled valid/test splits."""

    train: Split
    valid: Split
    test: Split
    n_classes: int
    seed: Optional[int] = None

    def __post_init__(self):
        d = self.train.X.shape[1]
        for name in ("valid", "test"):
            part = getattr(self, name)
            if part.X.shape[1] != d:
                raise ShapeError(f"{name} features have dimension {part.X.shape[1]}, train has {d}")
            if part.y is None:
                raise DomainError(f"{name} split must carry gold labels")
        if self.train.L is None:
            raise DomainError("train split must carry a label matrix")
        if len(self.train.L) != len(self.train):
            raise ShapeError("train label matrix and features disagree on N")

    @property
    def n_features(self) -> int:
        return self.train.X.shape[1]

    def equals(self, other: "DatasetBundle") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is b
            return np.array_equal(a, b)

        return (
            self.n_classes == other.n_classes
            and self.seed == other.seed
            and all(
                same(getattr(self, s).X, getattr(other, s).X)
                and same(getattr(self, s).y, getattr(other, s).y)
                for s in ("train", "valid", "test")
            )
            and self.train.L == other.train.L
        )


# ---------------------------------------------------------------------------
# CSV I/O


def _read_lines(path: PathLike):
    text = Path(path).read_text()
    return [ln.strip() for ln in text.splitlines()]


def load_label_matrix(path: PathLike, n_classes: Optional[int] = None) -> LabelMatrix:
    """Parse a label-matrix CSV.

    An optional ``#classes=C`` first line sets C (a non-None ``n_classes`` argument
    takes precedence). An optional header line starting with a non-numeric token
    (e.g. ``lf_1,lf_2``) is skipped.
    """
    lines = _read_lines(path)
    if not any(ln and not ln.startswith("#") for ln in lines):
        raise ShapeError("label matrix file has no rows (N=0)")
    start = 0
    if lines[0].startswith("#"):
        directive = lines[0][1:].replace(" ", "")
        if not directive.startswith("classes="):
            raise ParseError(f"unknown directive {lines[0]!r}", row=1)
        try:
            file_c = int(directive.split("=", 1)[1])
        except ValueError:
            raise ParseError(f"bad class count in {lines[0]!r}", row=1) from None
        if n_classes is None:
            n_classes = file_c
        start = 1
    if n_classes is None:
        raise DomainError("number of classes unknown: add a '#classes=C' line or pass n_classes")
    if start < len(lines) and lines[start] and not _looks_numeric(lines[start].split(",")[0]):
        start += 1

    grid = []
    width = None
    for r in range(start, len(lines)):
        line = lines[r]
        if not line:
            continue
        cells = line.split(",")
        row = []
        for c, cell in enumerate(cells):
            try:
                row.append(int(cell.strip()))
            except ValueError:
                raise ParseError(f"malformed integer {cell!r}", row=r + 1, col=c + 1) from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ShapeError(f"ragged label matrix: row {r + 1} has {len(row)} columns, expected {width}")
        grid.append(row)
    if not grid:
        raise ShapeError("label matrix file has no rows (N=0)")
    return LabelMatrix(np.array(grid, dtype=np.int64), n_classes)


def _looks_numeric(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def save_label_matrix(lm: LabelMatrix, path: PathLike, header: bool = False) -> None:
    lines = [f"#classes={lm.n_classes}"]
    if header:
        lines.append(",".join(f"lf_{j + 1}" for j in range(lm.n_lfs)))
    lines.extend(",".join(str(int(v)) for v in row) for row in lm.votes)
    Path(path).write_text("\n".join(lines) + "\n")


def load_features(path: PathLike) -> np.ndarray:
    lines = [ln for ln in _read_lines(path) if ln]
    if not lines:
        raise ShapeError("feature file has no rows")
    grid = []
    width = None
    for r, line in enumerate(lines):
        cells = line.split(",")
        try:
            row = [float(x) for x in cells]
        except ValueError:
            raise ParseError(f"malformed float in {line!r}", row=r + 1) from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ShapeError(f"ragged feature matrix at row {r + 1}")
        if not all(math.isfinite(v) for v in row):
            raise DomainError(f"non-finite feature value at row {r + 1}")
        grid.append(row)
    return np.array(grid, dtype=np.float64)


def save_features(X: np.ndarray, path: PathLike) -> None:
    X = np.asarray(X, dtype=np.float64)
    Path(path).write_text("".join(",".join(repr(float(v)) for v in row) + "\n" for row in X))


def load_gold(path: PathLike, n_classes: Optional[int] = None) -> np.ndarray:
    vals = []
    for r, line in enumerate(_read_lines(path)):
        if not line:
            continue
        try:
            vals.append(int(line))
        except ValueError:
            raise ParseError(f"malformed label {line!r}", row=r + 1) from None
    y = np.array(vals, dtype=np.int64)
    if y.size == 0:
        raise ShapeError("gold label file has no rows")
    if n_classes is not None:
        y = check_gold(y, n_classes)
    return y


def save_gold(y: np.ndarray, path: PathLike) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in y))


BUNDLE_FILES = {
    "train_votes": "train_votes.csv",
    "train_features": "train_features.csv",
    "train_gold": "train_gold.csv",
    "valid_features": "valid_features.csv",
    "valid_gold": "valid_gold.csv",
    "test_features": "test_features.csv",
    "test_gold": "test_gold.csv",
}


def save_bundle(bundle: DatasetBundle, directory: PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_label_matrix(bundle.train.L, d / BUNDLE_FILES["train_votes"])
    save_features(bundle.train.X, d / BUNDLE_FILES["train_features"])
    if bundle.train.y is not None:
        save_gold(bundle.train.y, d / BUNDLE_FILES["train_gold"])
    for name in ("valid", "test"):
        part = getattr(bundle, name)
        save_features(part.X, d / BUNDLE_FILES[f"{name}_features"])
        save_gold(part.y, d / BUNDLE_FILES[f"{name}_gold"])


def load_bundle(directory: PathLike, **overrides) -> DatasetBundle:
    """Load a bundle from ``directory``; keyword overrides replace individual file paths."""
    d = Path(directory) if directory is not None else None
    paths = {}
    for key, fname in BUNDLE_FILES.items():
        p = overrides.get(key)
        if p is None and d is not None:
            p = d / fname
        paths[key] = Path(p) if p is not None else None

    for key in ("train_features", "train_votes", "valid_features", "valid_gold", "test_features", "test_gold"):
        if paths[key] is None or not paths[key].exists():
            label = key.replace("_", " ")
            if key == "train_features":
                label = "features"
            raise FileNotFoundError(f"{label} not found: {paths[key]}")

    L = load_label_matrix(paths["train_votes"], overrides.get("n_classes"))
    C = L.n_classes
    Xtr = check_features(load_features(paths["train_features"]), len(L))
    ytr = None
    if paths["train_gold"] is not None and paths["train_gold"].exists():
        ytr = check_gold(load_gold(paths["train_gold"]), C, len(L))
    parts = {}
    for name in ("valid", "test"):
        X = load_features(paths[f"{name}_features"])
        y = check_gold(load_gold(paths[f"{name}_gold"]), C, X.shape[0])
        parts[name] = Split(X=X, y=y)
    return DatasetBundle(train=Split(X=Xtr, y=ytr, L=L), n_classes=C, **parts)


# ---------------------------------------------------------------------------
# Synthetic corpora


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-cluster features plus class-conditional LF noise."""

    n_train: int = 200
    n_valid: int = 100
    n_test: int = 100
    n_features: int = 5
    n_classes: int = 3
    n_lfs: int = 8
    class_separation: float = 2.0
    lf_accuracy: Union[float, Sequence[float]] = 0.8
    lf_coverage: Union[float, Sequence[float]] = 0.85
    seed: int = 0

    def accuracies(self) -> np.ndarray:
        return _per_lf(self.lf_accuracy, self.n_lfs, "lf_accuracy")

    def coverages(self) -> np.ndarray:
        return _per_lf(self.lf_coverage, self.n_lfs, "lf_coverage")

    def validate(self):
        for name in ("n_train", "n_valid", "n_test", "n_features", "n_lfs"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} must be positive")
        if self.n_classes < 2:
            raise DomainError("n_classes must be >= 2")
        if not self.class_separation >= 0:
            raise DomainError("class_separation must be non-negative")
        for name, vals in (("lf_accuracy", self.accuracies()), ("lf_coverage", self.coverages())):
            if np.any(vals <= 0) or np.any(vals > 1):
                raise DomainError(f"{name} entries must lie in (0, 1]")


def _per_lf(value, m, name):
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.size == 1:
        arr = np.full(m, arr[0])
    if arr.size != m:
        raise DomainError(f"{name} has {arr.size} entries, expected {m}")
    return arr


def class_centers(n_classes: int, n_features: int, separation: float, rng) -> np.ndarray:
    """Cluster means with pairwise distance ``separation`` when d >= C."""
    if n_features >= n_classes:
        centers = np.zeros((n_classes, n_features))
        centers[np.arange(n_classes), np.arange(n_classes)] = separation / math.sqrt(2.0)
        return centers
    dirs = rng.standard_normal((n_classes, n_features))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * separation / math.sqrt(2.0)


def simulate_votes(y: np.ndarray, n_classes: int, accuracy, coverage, rng) -> np.ndarray:
    """Class-conditional LF votes for gold labels ``y`` (1-based)."""
    n = y.shape[0]
    m = len(accuracy)
    votes = np.full((n, m), ABSTAIN, dtype=np.int64)
    for j in range(m):
        covered = rng.random(n) < coverage[j]
        correct = rng.random(n) < accuracy[j]
        # uniform wrong class: shift by 1..C-1
        shift = rng.integers(1, n_classes, size=n) if n_classes > 1 else np.zeros(n, dtype=np.int64)
        wrong = (y - 1 + shift) % n_classes + 1
        votes[:, j] = np.where(covered, np.where(correct, y, wrong), ABSTAIN)
    return votes


def generate_synthetic(spec: SyntheticSpec) -> DatasetBundle:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C, d = spec.n_classes, spec.n_features
    centers = class_centers(C, d, spec.class_separation, rng)
    sizes = (spec.n_train, spec.n_valid, spec.n_test)
    parts = []
    for n in sizes:
        y = rng.integers(1, C + 1, size=n)
        X = centers[y - 1] + rng.standard_normal((n, d))
        parts.append((X, y))
    votes = simulate_votes(parts[0][1], C, spec.accuracies(), spec.coverages(), rng)
    train = Split(X=parts[0][0], y=parts[0][1], L=LabelMatrix(votes, C))
    return DatasetBundle(
        train=train,
        valid=Split(X=parts[1][0], y=parts[1][1]),
        test=Split(X=parts[2][0], y=parts[2][1]),
        n_classes=C,
        seed=spec.seed,
    )


def split(X, y, votes: LabelMatrix, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetBundle:
    """Shuffle and partition a fully labelled corpus into train/valid/test."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DomainError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    X = check_features(X, len(votes))
    y = check_gold(y, votes.n_classes, len(votes))
    n = len(votes)
    n_train = int(round(fr[0] * n))
    n_valid = int(round(fr[1] * n))
    n_test = n - n_train - n_valid
    if min(n_train, n_valid, n_test) < 1:
        raise DomainError(f"split sizes {n_train}/{n_valid}/{n_test} include an empty split")
    perm = np.random.default_rng(seed).permutation(n)
    tr, va, te = perm[:n_train], perm[n_train : n_train + n_valid], perm[n_train + n_valid :]
    return DatasetBundle(
        train=Split(X=X[tr], y=y[tr], L=LabelMatrix(votes.votes[tr], votes.n_classes)),
        valid=Split(X=X[va], y=y[va]),
        test=Split(X=X[te], y=y[te]),
        n_classes=votes.n_classes,
        seed=seed,
    )

