"""Embedding matrices, label maps and their on-disk formats.

AVCE layout (all little-endian)::

    magic    4s   b"AVCE"
    version  u16  1
    modality u8   0 = speech, 1 = face
    reserved u8   0
    n        u64  number of samples
    d        u32  embedding dimension
    ids      n x (u16 length + UTF-8 bytes)
    payload  n*d float32, row-major

Labels are a headerless UTF-8 TSV of ``sample_id<TAB>class_id`` lines.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError, LabelError

MAGIC = b"AVCE"
VERSION = 1
_HEADER = struct.Struct("<4sHBBQI")
_ID_LEN = struct.Struct("<H")
UNIT_NORM_TOL = 1e-5


class Modality(str, enum.Enum):
    SPEECH = "speech"
    FACE = "face"

    @property
    def code(self) -> int:
        return 0 if self is Modality.SPEECH else 1

    @classmethod
    def from_code(cls, code: int) -> "Modality":
        if code == 0:
            return cls.SPEECH
        if code == 1:
            return cls.FACE
        raise FormatError(f"unknown modality code {code}")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Per-sample identity embeddings for one modality.

    ``zero_rows`` flags rows that were all-zero at normalization time; such
    rows stay zero and are scored as placeholders downstream.
    """

    modality: Modality
    sample_ids: tuple[str, ...]
    vectors: np.ndarray
    normalized: bool = False
    zero_rows: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise FormatError(f"embedding matrix must be N x d with N, d >= 1, got shape {vectors.shape}")
        if len(self.sample_ids) != vectors.shape[0]:
            raise FormatError(
                f"{len(self.sample_ids)} sample ids for {vectors.shape[0]} embedding rows"
            )
        finite = np.isfinite(vectors).all(axis=1)
        if not finite.all():
            row = int(np.flatnonzero(~finite)[0])
            raise FormatError(f"non-finite value in row {row} (sample id {self.sample_ids[row]!r})")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            seen: set[str] = set()
            for sid in self.sample_ids:
                if sid in seen:
                    raise FormatError(f"duplicate sample id {sid!r}")
                seen.add(sid)
        if vectors is self.vectors:
            vectors = vectors.copy()
        object.__setattr__(self, "vectors", _readonly(vectors))
        zero_rows = self.zero_rows
        if zero_rows is None:
            zero_rows = np.zeros(vectors.shape[0], dtype=bool)
        zero_rows = np.array(zero_rows, dtype=bool)
        if zero_rows.shape != (vectors.shape[0],):
            raise FormatError("zero_rows flag must have one entry per sample")
        object.__setattr__(self, "zero_rows", _readonly(zero_rows))

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def index_of(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.sample_ids)}

    def subset(self, indices: Sequence[int]) -> "EmbeddingSet":
        idx = np.asarray(indices, dtype=np.int64)
        return EmbeddingSet(
            self.modality,
            tuple(self.sample_ids[i] for i in idx),
            self.vectors[idx],
            self.normalized,
            self.zero_rows[idx],
        )


def l2_normalize(emb: EmbeddingSet) -> EmbeddingSet:
    """Scale every nonzero row to unit length; zero rows stay zero and are flagged."""
    v = emb.vectors.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", v, v))
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    out = (v / safe[:, None]).astype(np.float32)
    return EmbeddingSet(emb.modality, emb.sample_ids, out, True, zero | emb.zero_rows)


def check_normalized(emb: EmbeddingSet, what: str = "embedding set") -> None:
    if not emb.normalized:
        raise FormatError(f"{what} must be L2-normalized first")


def write_embeddings(emb: EmbeddingSet, path: str | Path) -> None:
    n, d = emb.vectors.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, emb.modality.code, 0, n, d))
        for sid in emb.sample_ids:
            raw = sid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"sample id longer than 65535 bytes: {sid[:32]!r}...")
            fh.write(_ID_LEN.pack(len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(emb.vectors, dtype="<f4").tobytes())


def load_embeddings(path: str | Path, modality: Modality | str | None = None) -> EmbeddingSet:
    """Read an AVCE file.

    If ``modality`` is given it must match the modality byte in the header.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: malformed header (file has {len(data)} bytes)")
    magic, version, mod_code, reserved, n, d = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: malformed header (bad magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"{path}: malformed header (unsupported version {version})")
    if reserved != 0:
        raise FormatError(f"{path}: malformed header (reserved byte is {reserved})")
    file_modality = Modality.from_code(mod_code)
    if modality is not None and Modality(modality) is not file_modality:
        raise FormatError(f"{path}: file holds {file_modality.value} embeddings, expected {Modality(modality).value}")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: malformed header (n={n}, d={d})")

    pos = _HEADER.size
    ids = []
    for i in range(n):
        if pos + 2 > len(data):
            raise FormatError(f"{path}: id block truncated at entry {i}")
        (length,) = _ID_LEN.unpack_from(data, pos)
        pos += 2
        if pos + length > len(data):
            raise FormatError(f"{path}: id block truncated at entry {i}")
        try:
            ids.append(data[pos : pos + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: sample id {i} is not valid UTF-8") from exc
        pos += length

    payload = len(data) - pos
    if payload != n * d * 4:
        raise FormatError(
            f"{path}: payload size mismatch: header declares {n}x{d} float32 "
            f"({n * d * 4} bytes), found {payload} bytes"
        )
    vectors = np.frombuffer(data, dtype="<f4", offset=pos).reshape(n, d).astype(np.float32)
    try:
        return EmbeddingSet(file_modality, tuple(ids), vectors, False)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Dense class assignment aligned with an EmbeddingSet's row order.

    ``classes[i]`` is the class (1..K) of ``sample_ids[i]``;
    ``original_ids[k - 1]`` is the label token class ``k`` had on disk.
    """

    sample_ids: tuple[str, ...]
    classes: np.ndarray
    original_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        classes = np.array(self.classes, dtype=np.int64)
        object.__setattr__(self, "classes", _readonly(classes))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "original_ids", tuple(str(o) for o in self.original_ids))
        if classes.shape != (len(self.sample_ids),):
            raise LabelError("one class per sample required")
        k = len(self.original_ids)
        if classes.size and (classes.min() < 1 or classes.max() > k):
            raise LabelError(f"class ids must lie in 1..{k}")
        if np.any(np.bincount(classes, minlength=k + 1)[1:] == 0):
            raise LabelError("every class must have at least one sample")

    @property
    def k(self) -> int:
        return len(self.original_ids)

    @property
    def class_sizes(self) -> dict[int, int]:
        counts = np.bincount(self.classes, minlength=self.k + 1)
        return {c: int(counts[c]) for c in range(1, self.k + 1)}

    @property
    def assignments(self) -> dict[str, int]:
        return dict(zip(self.sample_ids, (int(c) for c in self.classes)))

    @classmethod
    def from_raw(cls, sample_ids: Sequence[str], raw_labels: Iterable[object]) -> "LabelMap":
        """Re-index arbitrary label tokens densely in first-appearance order."""
        dense: dict[str, int] = {}
        classes = []
        for label in raw_labels:
            key = str(label)
            if key not in dense:
                dense[key] = len(dense) + 1
            classes.append(dense[key])
        return cls(tuple(sample_ids), np.array(classes, dtype=np.int64), tuple(dense))

    def check_covers(self, emb: EmbeddingSet) -> None:
        if self.sample_ids != emb.sample_ids:
            raise LabelError("label map is not aligned with the embedding set's sample ids")


def load_labels(path: str | Path, emb: EmbeddingSet) -> LabelMap:
    """Read a labels TSV and align it to ``emb``'s row order."""
    position = emb.index_of()
    raw: dict[str, str] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise FormatError(f"{path}:{lineno}: expected 'sample_id<TAB>class_id'")
            sid, label = parts
            if sid not in position:
                raise LabelError(f"{path}:{lineno}: unknown sample id {sid!r}")
            if sid in raw:
                raise LabelError(f"{path}:{lineno}: duplicate sample id {sid!r}")
            raw[sid] = label
            order.append(sid)
    missing = [sid for sid in emb.sample_ids if sid not in raw]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise LabelError(f"{path}: {len(missing)} sample id(s) missing from labels: {shown}")

    dense: dict[str, int] = {}
    for sid in order:
        dense.setdefault(raw[sid], len(dense) + 1)
    classes = np.array([dense[raw[sid]] for sid in emb.sample_ids], dtype=np.int64)
    return LabelMap(emb.sample_ids, classes, tuple(dense))


def write_labels(labels: LabelMap, path: str | Path, *, original: bool = True,
                 keep: Mapping[str, bool] | None = None) -> None:
    """Write ``sample_id<TAB>class_id``; ``keep`` filters rows by sample id."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sid, c in zip(labels.sample_ids, labels.classes):
            if keep is not None and not keep.get(sid, False):
                continue
            label = labels.original_ids[c - 1] if original else str(int(c))
            fh.write(f"{sid}\t{label}\n")
