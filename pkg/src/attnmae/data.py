"""Dataset construction: synthetic grouped tokens, CSV and raw-byte
ingestion, consistent position permutation, and seeded splits.

Datasets are immutable arrays of fixed-length token sequences. All
randomness comes from the package's own counter-based generator, so a
dataset is a pure function of its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .embedding import encode_discrete
from .rng import Rng

__all__ = ["Batch", "Dataset", "CsvParseError", "gen_grouped_tokens",
           "load_csv_tabular", "load_text_utf8", "standardize_columns",
           "permute_dataset", "split", "export_csv"]


class CsvParseError(ValueError):
    pass


@dataclass
class Batch:
    """One group of samples handed to the model."""
    tokens: np.ndarray            # (b, n) int64 ids or float64 values
    pads: np.ndarray              # (b, n) bool, True at pad slots
    labels: np.ndarray | None     # (b,) optional


@dataclass
class Dataset:
    tokens: np.ndarray                  # (N, n)
    pads: np.ndarray | None             # (N, n) bool or None when nothing is padded
    labels: np.ndarray | None           # (N,)
    discrete: bool
    n: int
    group_assignment: np.ndarray | None = None  # (n,) synthetic only

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[1] != self.n:
            raise ValueError(f"tokens must be (N, {self.n}), got {self.tokens.shape}")
        if self.labels is not None and len(self.labels) != len(self.tokens):
            raise ValueError("labels must cover every sample")

    def __len__(self):
        return self.tokens.shape[0]

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            tokens=self.tokens[idx],
            pads=None if self.pads is None else self.pads[idx],
            labels=None if self.labels is None else self.labels[idx],
        )

    def batch(self, indices) -> Batch:
        idx = np.asarray(indices, dtype=np.int64)
        pads = (np.zeros((len(idx), self.n), dtype=bool) if self.pads is None
                else self.pads[idx])
        labels = None if self.labels is None else self.labels[idx]
        return Batch(tokens=self.tokens[idx], pads=pads, labels=labels)


def gen_grouped_tokens(n: int, num_groups: int, num_samples: int,
                       noise_sigma: float, rng: Rng,
                       shuffle_positions: bool = False) -> Dataset:
    """Continuous sequences whose positions split into correlated groups.

    Positions are partitioned into groups of n/num_groups (contiguous ids
    by default). Per sample, each group draws one standard-normal latent
    and every member equals that latent plus independent noise of scale
    noise_sigma. The downstream label is the sign of the latent sum.

    Stream layout: num_samples*num_groups latents first, then
    num_samples*n noise values, then (optionally) the position shuffle.
    """
    if n % num_groups:
        raise ValueError(f"num_groups={num_groups} must divide n={n}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    latents = rng.normals((num_samples, num_groups))
    noise = rng.normals((num_samples, n))
    assignment = np.repeat(np.arange(num_groups, dtype=np.int64), n // num_groups)
    if shuffle_positions:
        assignment = assignment[rng.permutation(n)]
    tokens = latents[:, assignment] + noise_sigma * noise
    labels = (np.add.reduce(latents, axis=1) > 0).astype(np.int64)
    return Dataset(tokens=tokens, pads=None, labels=labels, discrete=False,
                   n=n, group_assignment=assignment)


def _parse_cell(cell: str, row: int) -> float:
    try:
        return float(cell)
    except ValueError:
        raise CsvParseError(f"row {row}: non-numeric cell {cell!r}") from None


def load_csv_tabular(path, label_column=None, normalize: bool = False) -> Dataset:
    """Each numeric CSV row becomes a sequence of scalar tokens.

    A non-numeric first row is treated as a header. `label_column` (name
    or index) moves that column into labels. `normalize` standardizes
    each feature column by this file's own statistics; use
    standardize_columns() to carry training-split statistics to other
    splits instead.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise CsvParseError(f"{path}: empty file")
    first = lines[0].split(",")
    header = None
    try:
        [float(c) for c in first]
    except ValueError:
        header = [c.strip() for c in first]
        lines = lines[1:]
    width = len(first)
    rows = []
    for i, ln in enumerate(lines, start=1):
        cells = ln.split(",")
        if len(cells) != width:
            raise CsvParseError(f"row {i}: expected {width} columns, got {len(cells)}")
        rows.append([_parse_cell(c, i) for c in cells])
    values = np.array(rows, dtype=np.float64)
    labels = None
    if label_column is not None:
        if isinstance(label_column, str):
            if header is None or label_column not in header:
                raise CsvParseError(f"no column named {label_column!r}")
            col = header.index(label_column)
        else:
            col = int(label_column)
        labels = values[:, col]
        values = np.delete(values, col, axis=1)
    ds = Dataset(tokens=values, pads=None, labels=labels, discrete=False,
                 n=values.shape[1])
    if normalize:
        ds, _ = standardize_columns(ds)
    return ds


def standardize_columns(ds: Dataset, stats=None):
    """Standardize feature columns; returns (dataset, (mean, std)).

    With stats=None the statistics come from `ds` itself (the training
    split); pass them back in to transform other splits consistently.
    Columns with std below 1e-12 are only centered.
    """
    if stats is None:
        mean = ds.tokens.mean(axis=0)
        std = ds.tokens.std(axis=0)
    else:
        mean, std = stats
    safe = np.where(std < 1e-12, 1.0, std)
    return replace(ds, tokens=(ds.tokens - mean) / safe), (mean, std)


def load_text_utf8(path, n: int) -> Dataset:
    """Chunk a byte stream into length-n padded id sequences."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e
    chunks = [raw[i:i + n] for i in range(0, len(raw), n)]
    ids = np.empty((len(chunks), n), dtype=np.int64)
    pads = np.empty((len(chunks), n), dtype=bool)
    for i, chunk in enumerate(chunks):
        ids[i], pads[i] = encode_discrete(chunk, n)
    return Dataset(tokens=ids, pads=pads, labels=None, discrete=True, n=n)


def permute_dataset(ds: Dataset, p) -> Dataset:
    """Reorder every sample's positions by the same permutation p.

    New position j holds what was at p[j]; the group assignment moves
    alongside so group identity stays attached to its tokens.
    """
    p = np.asarray(p, dtype=np.int64)
    if p.shape != (ds.n,) or not np.array_equal(np.sort(p), np.arange(ds.n)):
        raise ValueError(f"p must be a permutation of 0..{ds.n - 1}")
    return replace(
        ds,
        tokens=ds.tokens[:, p],
        pads=None if ds.pads is None else ds.pads[:, p],
        group_assignment=None if ds.group_assignment is None else ds.group_assignment[p],
    )


def split(ds: Dataset, fractions, seed: int):
    """Seeded disjoint partition with sizes proportional to fractions."""
    fractions = [float(f) for f in fractions]
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    total = len(ds)
    bounds = np.floor(np.cumsum(fractions) * total + 0.5).astype(np.int64)
    sizes = np.diff(np.concatenate([[0], bounds]))
    for frac, size in zip(fractions, sizes):
        if frac > 0 and size == 0:
            raise ValueError(f"fraction {frac} of {total} samples is an empty partition")
    perm = Rng(seed).permutation(total)
    parts = []
    start = 0
    for size in sizes:
        parts.append(ds.take(perm[start:start + size]))
        start += size
    return tuple(parts)


def export_csv(ds: Dataset, path) -> None:
    """Write tokens (and labels, if present) back out as numeric CSV."""
    cols = [f"x{i}" for i in range(ds.n)]
    if ds.labels is not None:
        cols.append("label")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.tokens[i]]
            if ds.labels is not None:
                row.append(repr(float(ds.labels[i])))
            fh.write(",".join(row) + "\n")
