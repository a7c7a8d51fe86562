"""
Checkpoint files, top-k retention and weight averaging.

Binary layout (all integers little-endian)::

    b"W2VJ" | u32 version | u64 step | u8 has_metric | f64 metric
    | u32 meta_len | meta (UTF-8 JSON)
    | u32 count | count x entry
    | u32 CRC32 of every preceding byte

    entry = u32 name_len | name | u8 dtype | u32 rank | rank x u64 dim | payload

Entries are written in lexicographic name order; dtype 0 is float32,
1 is float64.
"""

import json
import os
import struct
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Union

import numpy as np

from ..core.optim import AdamState, ParameterSet
from .errors import (
    CheckpointError,
    CheckpointFormatError,
    CheckpointMismatchError,
    ChecksumError,
    StoreLockedError,
)
from .logging import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

MAGIC = b"W2VJ"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sIQBd")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

INDEX_NAME = "top_k.json"
LOCK_NAME = "store.lock"


@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray]
    step: int = 0
    dev_metric: Optional[float] = None
    meta: Dict[str, Any] = field(default_factory=dict)
    path: Optional[Path] = None

    def to_parameters(self) -> ParameterSet:
        return ParameterSet(self.arrays)


def _as_arrays(
    params: Union[ParameterSet, Mapping[str, np.ndarray]]
) -> Dict[str, np.ndarray]:
    if isinstance(params, ParameterSet):
        return params.to_arrays()
    return {name: np.asarray(params[name]) for name in sorted(params)}


def encode_checkpoint(
    params: Union[ParameterSet, Mapping[str, np.ndarray]],
    step: int = 0,
    dev_metric: Optional[float] = None,
    meta: Optional[Mapping[str, Any]] = None,
) -> bytes:
    arrays = _as_arrays(params)
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    has_metric = dev_metric is not None
    metric = float(dev_metric or 0.0)
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, int(step), has_metric, metric),
        _U32.pack(len(meta_bytes)),
        meta_bytes,
        _U32.pack(len(arrays)),
    ]
    for name in sorted(arrays):
        array = arrays[name]
        dtype = array.dtype.newbyteorder("<")
        if dtype not in _DTYPE_CODES:
            raise CheckpointFormatError(f"{name}: unsupported dtype {array.dtype}")
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)) + encoded)
        parts.append(struct.pack("<BI", _DTYPE_CODES[dtype], array.ndim))
        parts.extend(_U64.pack(d) for d in array.shape)
        parts.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise ChecksumError("checkpoint payload ends early")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return int(_U32.unpack(self.take(4))[0])


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < _HEADER.size + 4:
        raise ChecksumError(
            f"{source}: file too short to be a checkpoint ({len(data)} bytes)"
        )
    magic, version, step, has_metric, metric = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{source}: unsupported format version {version}")
    body, (stored_crc,) = data[:-4], _U32.unpack(data[-4:])
    if zlib.crc32(body) != stored_crc:
        raise ChecksumError(f"{source}: CRC32 mismatch (corrupt or truncated file)")

    reader = _Reader(body)
    reader.offset = _HEADER.size
    meta = json.loads(reader.take(reader.u32()).decode("utf-8"))
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        code, rank = struct.unpack("<BI", reader.take(5))
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(
                f"{source}: {name} has unknown dtype code {code}"
            )
        dims = tuple(int(_U64.unpack(reader.take(8))[0]) for _ in range(rank))
        dtype = _CODE_DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        stored = np.frombuffer(reader.take(size), dtype=dtype).reshape(dims)
        arrays[name] = stored.astype(dtype.newbyteorder("="))
    return Checkpoint(
        arrays=arrays,
        step=int(step),
        dev_metric=float(metric) if has_metric else None,
        meta=meta,
    )


def save_checkpoint(
    path: PathLike,
    params: Union[ParameterSet, Mapping[str, np.ndarray]],
    step: int = 0,
    dev_metric: Optional[float] = None,
    meta: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(params, step, dev_metric, meta))
    os.replace(tmp, path)
    logger.debug("saved checkpoint %s (step %d)", path, step)
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    checkpoint = decode_checkpoint(data, str(path))
    checkpoint.path = path
    return checkpoint


def save_optimizer_state(path: PathLike, state: AdamState) -> Path:
    meta = {
        "kind": "adam",
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
    }
    return save_checkpoint(path, state.to_arrays(), step=state.step, meta=meta)


def load_optimizer_state(path: PathLike) -> AdamState:
    checkpoint = load_checkpoint(path)
    if checkpoint.meta.get("kind") != "adam":
        raise CheckpointFormatError(f"{path} does not hold optimizer state")
    return AdamState.from_arrays(
        checkpoint.arrays,
        step=checkpoint.step,
        beta1=checkpoint.meta["beta1"],
        beta2=checkpoint.meta["beta2"],
        eps=checkpoint.meta["eps"],
    )


def average_checkpoints(paths: Sequence[PathLike]) -> Checkpoint:
    """Element-wise mean with float64 accumulation.

    Inputs are summed in (step, path) order, so the result does not depend on
    the order of ``paths``. The metadata of the first checkpoint in that
    order is kept.
    """
    if not paths:
        raise CheckpointError("average needs at least one checkpoint")
    checkpoints = sorted(
        (load_checkpoint(p) for p in paths), key=lambda c: (c.step, str(c.path))
    )
    reference = checkpoints[0]
    totals = {
        name: array.astype(np.float64) for name, array in reference.arrays.items()
    }
    for checkpoint in checkpoints[1:]:
        names = set(checkpoint.arrays)
        if names != set(totals):
            offending = sorted(names.symmetric_difference(totals))[0]
            raise CheckpointMismatchError(
                f"{checkpoint.path}: parameter sets differ at {offending!r}"
            )
        for name in sorted(totals):
            array = checkpoint.arrays[name]
            expected = totals[name].shape
            if array.shape != expected:
                raise CheckpointMismatchError(
                    f"{checkpoint.path}: {name!r} has dims {array.shape}, "
                    f"expected {expected}"
                )
            totals[name] += array
    count = float(len(checkpoints))
    arrays = {
        name: (total / count).astype(reference.arrays[name].dtype)
        for name, total in totals.items()
    }
    meta = dict(reference.meta)
    meta["averaged_from"] = [str(c.path) for c in checkpoints]
    return Checkpoint(arrays=arrays, step=max(c.step for c in checkpoints), meta=meta)


# ----------------------------------------------------------------------
# Top-k store
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class StoreEntry:
    path: str
    step: int
    dev_metric: float


def select_top_k(entries: Sequence[StoreEntry], k: int) -> List[StoreEntry]:
    """Lowest metric first; equal metrics keep the earlier step."""
    return sorted(entries, key=lambda e: (e.dev_metric, e.step))[:k]


class CheckpointStore:
    """A directory of retained checkpoints indexed by ``top_k.json``."""

    def __init__(self, directory: PathLike, k: int = 5) -> None:
        if k <= 0:
            raise CheckpointError(f"k must be positive, got {k}")
        self.directory = Path(directory)
        self.k = k
        self.directory.mkdir(parents=True, exist_ok=True)
        self.entries: List[StoreEntry] = self._load_index()

    @property
    def index_path(self) -> Path:
        return self.directory / INDEX_NAME

    def _load_index(self) -> List[StoreEntry]:
        if not self.index_path.exists():
            return []
        raw = json.loads(self.index_path.read_text(encoding="utf-8"))
        return [StoreEntry(**item) for item in raw]

    def _save_index(self) -> None:
        payload = json.dumps([asdict(e) for e in self.entries], indent=2)
        tmp = self.index_path.with_suffix(".tmp")
        tmp.write_text(payload + "\n", encoding="utf-8")
        os.replace(tmp, self.index_path)

    @contextmanager
    def lock(self) -> Iterator[None]:
        """Exclusive writer lock via an O_EXCL lock file."""
        lock_path = self.directory / LOCK_NAME
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise StoreLockedError(
                f"{self.directory} is locked by another writer ({lock_path})"
            ) from e
        try:
            os.write(fd, str(os.getpid()).encode("ascii"))
            yield
        finally:
            os.close(fd)
            lock_path.unlink(missing_ok=True)

    def paths(self) -> List[Path]:
        return [Path(e.path) for e in self.entries]

    def metrics(self) -> List[float]:
        return [e.dev_metric for e in self.entries]


def retain_top_k(
    store: CheckpointStore, candidate: PathLike, k: Optional[int] = None
) -> CheckpointStore:
    """Add ``candidate`` to ``store`` and keep its ``k`` lowest-metric checkpoints.

    Files that drop out of the top k are deleted when they live inside the
    store directory.
    """
    k = store.k if k is None else k
    checkpoint = load_checkpoint(candidate)
    if checkpoint.dev_metric is None:
        raise CheckpointError(f"{candidate} has no dev metric to rank by")
    with store.lock():
        entry = StoreEntry(
            path=str(candidate), step=checkpoint.step, dev_metric=checkpoint.dev_metric
        )
        pool = [e for e in store.entries if e.path != entry.path] + [entry]
        kept = select_top_k(pool, k)
        for dropped in pool:
            if dropped in kept:
                continue
            dropped_path = Path(dropped.path)
            if dropped_path.parent.resolve() == store.directory.resolve():
                dropped_path.unlink(missing_ok=True)
                logger.debug(
                    "dropped checkpoint %s (metric %.6g)",
                    dropped_path,
                    dropped.dev_metric,
                )
        store.entries = kept
        store._save_index()
    return store
