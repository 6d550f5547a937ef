"""Categorical data container and CSV ingestion."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError


class DataError(ContractError):
    """Malformed or inconsistent categorical data."""


@dataclass(frozen=True, eq=False)
class CategoricalDataset:
    """N x P matrix of 0-based category indices plus per-variable cardinalities.

    ``idx`` holds the same data re-indexed into the flattened layout where
    variable j occupies columns ``offsets[j] .. offsets[j+1]-1``; this is
    the layout the variational parameters use.
    """

    values: np.ndarray
    cardinalities: np.ndarray
    names: tuple[str, ...] | None = None
    offsets: np.ndarray = field(init=False, repr=False)
    idx: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.int32, copy=True)
        if values.ndim != 2:
            raise DataError(f"expected a 2-d array, got shape {values.shape}")
        card = np.array(self.cardinalities, dtype=np.int64, copy=True)
        if card.shape != (values.shape[1],):
            raise DataError("cardinalities must have one entry per variable")
        if np.any(card < 2):
            raise DataError("every variable needs at least 2 categories")
        if values.size and (values.min() < 0 or np.any(values >= card[None, :])):
            raise DataError("category index out of range for its variable")
        offsets = np.concatenate([[0], np.cumsum(card)]).astype(np.int64)
        idx = np.ascontiguousarray(values + offsets[:-1][None, :].astype(np.int32), dtype=np.int32)
        for arr in (values, card, offsets, idx):
            arr.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "cardinalities", card)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "idx", idx)
        if self.names is not None and len(self.names) != values.shape[1]:
            raise DataError("one name per variable required")

    @classmethod
    def from_array(cls, values, cardinalities=None, names=None) -> "CategoricalDataset":
        values = np.asarray(values)
        if cardinalities is None:
            cardinalities = np.maximum(values.max(axis=0) + 1, 2) if values.size else np.full(values.shape[1], 2)
        return cls(values, cardinalities, tuple(names) if names is not None else None)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    @property
    def n_columns(self) -> int:
        """Total number of categories over all variables (sum of L_j)."""
        return int(self.offsets[-1])

    @property
    def is_binary(self) -> bool:
        return bool(np.all(self.cardinalities == 2))

    def take(self, rows) -> "CategoricalDataset":
        return CategoricalDataset(self.values[rows], self.cardinalities, self.names)

    def category_totals(self) -> np.ndarray:
        """Per flattened column, how many rows take that category."""
        return np.bincount(self.idx.ravel(), minlength=self.n_columns).astype(np.float64)


def read_csv(path, cardinalities=None) -> CategoricalDataset:
    """Read integer category codes with a header row; missing cells are rejected."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([int(cell) for cell in row])
            except ValueError:
                raise DataError(f"{path}:{line_no}: missing or non-integer value") from None
    values = np.array(rows, dtype=np.int64).reshape(-1, len(header))
    return CategoricalDataset.from_array(values, cardinalities, names=[h.strip() for h in header])


def write_csv(path, data: CategoricalDataset) -> None:
    names = data.names or tuple(f"v{j}" for j in range(data.n_vars))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        writer.writerows(data.values.tolist())


def read_labels(path) -> np.ndarray:
    """One integer label per line; an optional non-numeric header is skipped."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if lines and not lines[0].lstrip("-").isdigit():
        lines = lines[1:]
    return np.array([int(ln.split(",")[-1]) for ln in lines], dtype=np.int64)


def write_labels(path, labels) -> None:
    text = "label\n" + "".join(f"{int(v)}\n" for v in labels)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)
