"""GPS trajectories to hexagon token sequences, splits, vocabulary and training windows."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .hexgrid import GridSpec, HexCell, grid_line, hex_distance, point_to_cell, project

PAD = 0
EOT = 1
PAD_TOKEN = "<PAD>"
EOT_TOKEN = "EOT"
MIN_TRAJ_LEN = 15


class DataError(ValueError):
    """Malformed or unusable input data."""


class UnknownCellError(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""



@dataclass
class RawTrajectory:
    entity_id: str
    points: list  # (timestamp, lat, lon)

    def __post_init__(self):
        if not self.points:
            raise DataError(f"trajectory {self.entity_id!r} has no points")


@dataclass
class HexTrajectory:
    start_time: float
    cells: list
    terminated: bool = True

    def __len__(self):
        return len(self.cells)

    def tokens(self) -> list[str]:
        out = [c.token for c in self.cells]
        if self.terminated:
            out.append(EOT_TOKEN)
        return out


@dataclass
class TrainingWindow:
    ids: np.ndarray
    loss_mask: np.ndarray


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def all(self):
        return self.train + self.val + self.test


# -- raw input ----------------------------------------------------------------

def load_raw(path) -> list[RawTrajectory]:
    """Read ``entity_id,timestamp,lat,lon`` rows; one trajectory per id, points time-sorted."""
    groups: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip() for h in header] != ["entity_id", "timestamp", "lat", "lon"]:
            raise DataError(f"{path}: line 1: expected header entity_id,timestamp,lat,lon")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 4:
                raise DataError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            try:
                ts, lat, lon = float(row[1]), float(row[2]), float(row[3])
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-numeric value in {row[1:]}") from None
            if not all(map(math.isfinite, (ts, lat, lon))) or abs(lat) > 90 or abs(lon) > 180:
                raise DataError(f"{path}: line {lineno}: invalid coordinate")
            groups.setdefault(row[0], []).append((ts, lat, lon))
    # stable sort keeps input order for equal timestamps
    return [RawTrajectory(eid, sorted(pts, key=lambda p: p[0])) for eid, pts in groups.items()]


# -- conversion ---------------------------------------------------------------

def bridge(cells: Iterable[HexCell], connect: Callable[[HexCell, HexCell], list] | None = None) -> list[HexCell]:
    """Collapse repeats and fill gaps so consecutive cells are adjacent.

    ``connect(a, b)`` returns a path from ``a`` to ``b`` inclusive; by default
    a straight grid line.  An empty path means unreachable: ``b`` is skipped.
    """
    connect = connect or grid_line
    out: list[HexCell] = []
    for c in cells:
        if not out:
            out.append(c)
            continue
        last = out[-1]
        if c == last:
            continue
        if c.res == last.res and hex_distance(last, c) == 1:
            out.append(c)
            continue
        path = connect(last, c)
        if path:
            out.extend(path[1:])
    return out


def to_hex_sequence(t: RawTrajectory, res: int, spec: GridSpec) -> HexTrajectory:
    cells = [point_to_cell(project(lat, lon, spec), res, spec) for _, lat, lon in t.points]
    return HexTrajectory(start_time=t.points[0][0], cells=bridge(cells), terminated=True)


def filter_min_length(seqs: Sequence[HexTrajectory], min_len: int = MIN_TRAJ_LEN) -> list[HexTrajectory]:
    """Keep sequences with at least ``min_len`` cells (EOT not counted)."""
    return [s for s in seqs if len(s.cells) >= min_len]


def split_by_start_time(seqs: Sequence[HexTrajectory]) -> DatasetSplit:
    """Chronological 70/10/20 split; rounding remainder goes to test."""
    n = len(seqs)
    if n < 10:
        raise DataError(f"need at least 10 trajectories to split, got {n}")
    ordered = sorted(seqs, key=lambda s: s.start_time)
    n_train, n_val = n * 7 // 10, n // 10
    return DatasetSplit(
        train=ordered[:n_train],
        val=ordered[n_train:n_train + n_val],
        test=ordered[n_train + n_val:],
    )


# -- vocabulary ---------------------------------------------------------------

class Vocabulary:
    """Cell token <-> integer id.  Ids 0 and 1 are reserved for PAD and EOT."""

    def __init__(self, tokens: Iterable[str] = (), strict: bool = False):
        self.itos = [PAD_TOKEN, EOT_TOKEN]
        self.stoi = {PAD_TOKEN: PAD, EOT_TOKEN: EOT}
        self.strict = strict
        for tok in tokens:
            self.add(tok)
        self._cells = None

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
            self._cells = None
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        if isinstance(token, HexCell):
            token = token.token
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id_of(self, cell: HexCell | str) -> int:
        tok = cell.token if isinstance(cell, HexCell) else cell
        try:
            return self.stoi[tok]
        except KeyError:
            raise UnknownCellError(f"cell {tok} not in vocabulary") from None

    def cell_of(self, idx: int) -> HexCell | None:
        """The cell for a non-reserved id, ``None`` for PAD/EOT."""
        if idx < 2:
            return None
        return self.cells[idx]

    @property
    def cells(self) -> list:
        if self._cells is None:
            self._cells = [None, None] + [HexCell.parse(t) for t in self.itos[2:]]
        return self._cells

    def encode(self, traj: HexTrajectory) -> list[int]:
        ids = [self.id_of(c) for c in traj.cells]
        if traj.terminated:
            ids.append(EOT)
        return ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path, strict: bool = False) -> Vocabulary:
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        if lines[:2] != [PAD_TOKEN, EOT_TOKEN]:
            raise DataError(f"{path}: vocabulary must start with {PAD_TOKEN} and {EOT_TOKEN}")
        return cls(lines[2:], strict=strict)


def build_vocab(split: DatasetSplit, strict: bool = False) -> Vocabulary:
    """Ids in first-occurrence order over train, then val, then test.

    With ``strict`` only training cells are admitted and encoding any other
    cell raises :class:`UnknownCellError`.
    """
    groups = [split.train] if strict else [split.train, split.val, split.test]
    vocab = Vocabulary(strict=strict)
    for group in groups:
        for traj in group:
            for c in traj.cells:
                vocab.add(c.token)
    if len(vocab) == 2:
        raise DataError("cannot build a vocabulary from an empty corpus")
    return vocab


# -- windows ------------------------------------------------------------------

def make_windows(ids: Sequence[int], l: int, k: int) -> list[TrainingWindow]:
    """Stride-1 windows of length ``l + k`` plus shorter tail windows ending at the last token.

    Only positions after the first ``l`` tokens of a window are supervised.
    """
    if l < 1 or k < 1:
        raise ValueError("l and k must be >= 1")
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids)
    if n < l + 1:
        return []
    lengths = [(s, l + k) for s in range(n - (l + k) + 1)]
    lengths += [(n - m, m) for m in range(min(l + k - 1, n), l, -1)]
    windows = []
    for start, m in lengths:
        mask = np.zeros(m, dtype=bool)
        mask[l:] = True
        windows.append(TrainingWindow(ids[start:start + m].copy(), mask))
    return windows


# -- dataset files ------------------------------------------------------------

DATASET_MAGIC = "# hextraj-dataset"


def write_dataset(path, seqs: Sequence[HexTrajectory], spec: GridSpec, res_label: str, data_hash: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{DATASET_MAGIC} res={res_label} data_hash={data_hash} {spec.to_text()}\n")
        for s in seqs:
            fh.write(" ".join(s.tokens()) + "\n")


def read_dataset(path):
    """Returns ``(seqs, spec, header_fields)``; start times become line indices."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(DATASET_MAGIC):
            raise DataError(f"{path}: not a dataset file")
        fields = dict(item.split("=", 1) for item in header[len(DATASET_MAGIC):].split())
        spec = GridSpec.from_text(header[len(DATASET_MAGIC):])
        seqs = []
        for lineno, line in enumerate(fh, start=2):
            toks = line.split()
            if not toks:
                continue
            terminated = toks[-1] == EOT_TOKEN
            if terminated:
                toks = toks[:-1]
            try:
                cells = [HexCell.parse(t) for t in toks]
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            seqs.append(HexTrajectory(start_time=float(lineno - 2), cells=cells, terminated=terminated))
    return seqs, spec, fields
