"""Binary containers.

  - EmbeddingFile ("GEMB"): header <4sIII (magic, version, count, dim), then
    count×dim float32 LE row-major, then an optional u64-length-prefixed
    JSON metadata block.
  - Index container ("GEOX"): header <4sIII (magic, version, dim, layers),
    a length-prefixed JSON block (config, warnings, flags), every layer,
    the point tables (climb, K, bottom distances, B, D_o, indexed points)
    and an optional "POOL" section with the sample pool and its aux queues.
  - Matrix dump: raw little-endian float64, row-major, square, no header.

Every float table in the index container is float64 so a reloaded index
answers every query bit-identically.
"""

import json
import logging
import math
import os
import struct
from typing import Any, Dict, Optional, Tuple

import numpy as np

from core.graph import KnnGraph
from core.hierarchy import CenterGroup, HierarchicalIndex, Layer, _finish_layer
from core.pool import AuxQueues, FeaturePool, PoolError
from core.run_config import HierarchyConfig
from core.structured_logger import EventType, log_event

logger = logging.getLogger(__name__)

EMBED_MAGIC = b"GEMB"
EMBED_VERSION = 1
INDEX_MAGIC = b"GEOX"
INDEX_VERSION = 1
POOL_MAGIC = b"POOL"
HEADER = struct.Struct("<4sIII")
NONE_U32 = 0xFFFFFFFF

EDGE_DTYPE = np.dtype([("u", "<u4"), ("v", "<u4"), ("w", "<f8")])


class CorruptFileError(ValueError):
    """Raised when a container fails its magic, version or size checks."""

    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


# ---------------------------------------------------------------------------
# Low-level cursor helpers
# ---------------------------------------------------------------------------
class _Writer:
    def __init__(self) -> None:
        self.parts: list = []

    def pack(self, fmt: str, *values: Any) -> None:
        self.parts.append(struct.pack(fmt, *values))

    def array(self, arr: np.ndarray, dtype: str) -> None:
        self.parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    def blob(self, data: bytes) -> None:
        self.pack("<Q", len(data))
        self.parts.append(data)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, path: str) -> None:
        self.data = memoryview(data)
        self.pos = 0
        self.path = path

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def _need(self, size: int) -> None:
        if size < 0 or self.pos + size > len(self.data):
            raise CorruptFileError(self.path, f"truncated at byte {self.pos} (needed {size} more)")

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        size = struct.calcsize(fmt)
        self._need(size)
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def u64(self) -> int:
        return self.unpack("<Q")[0]

    def array(self, dtype: Any, count: int, shape: Optional[Tuple[int, ...]] = None) -> np.ndarray:
        dt = np.dtype(dtype)
        self._need(dt.itemsize * count)
        out = np.frombuffer(self.data, dtype=dt, count=count, offset=self.pos).copy()
        self.pos += dt.itemsize * count
        return out.reshape(shape) if shape is not None else out

    def blob(self) -> bytes:
        size = self.u64()
        self._need(size)
        out = bytes(self.data[self.pos:self.pos + size])
        self.pos += size
        return out


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write_bytes(path: str, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)


def _check_header(reader: _Reader, magic: bytes, version: int) -> Tuple[int, int]:
    if reader.remaining < HEADER.size:
        raise CorruptFileError(reader.path, "file shorter than its header")
    got_magic, got_version, a, b = reader.unpack(HEADER.format)
    if got_magic != magic:
        raise CorruptFileError(reader.path, f"bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise CorruptFileError(reader.path, f"unsupported version {got_version}")
    return a, b


# ---------------------------------------------------------------------------
# Embedding file
# ---------------------------------------------------------------------------
def write_embeddings(path: str, points: np.ndarray, metadata: Optional[Dict[str, Any]] = None) -> None:
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {X.shape}")
    w = _Writer()
    w.pack(HEADER.format, EMBED_MAGIC, EMBED_VERSION, X.shape[0], X.shape[1])
    w.array(X, "<f4")
    if metadata is not None:
        w.blob(json.dumps(metadata, sort_keys=True).encode("utf-8"))
    _write_bytes(path, w.getvalue())
    log_event(logger, logging.DEBUG, EventType.FILE_SAVED, "embeddings written",
              path=path, count=X.shape[0], dim=X.shape[1])


def read_embeddings(path: str) -> Tuple[np.ndarray, Optional[Dict[str, Any]]]:
    """Points as float64 (widened from the stored float32) and metadata."""
    r = _Reader(_read_bytes(path), path)
    count, dim = _check_header(r, EMBED_MAGIC, EMBED_VERSION)
    payload = count * dim * 4
    if r.remaining < payload:
        raise CorruptFileError(path, f"payload holds {r.remaining} bytes, header declares {payload}")
    X = r.array("<f4", count * dim, (count, dim)).astype(np.float64)
    metadata = None
    if r.remaining:
        if r.remaining < 8:
            raise CorruptFileError(path, "trailing bytes are not a metadata block")
        size = r.u64()
        if size != r.remaining:
            raise CorruptFileError(path, f"metadata length {size} != {r.remaining} remaining bytes")
        r.pos -= 8
        try:
            metadata = json.loads(r.blob().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptFileError(path, f"metadata is not valid JSON: {e}") from e
    log_event(logger, logging.DEBUG, EventType.FILE_LOADED, "embeddings read",
              path=path, count=count, dim=dim)
    return X, metadata


# ---------------------------------------------------------------------------
# Matrix dump
# ---------------------------------------------------------------------------
def write_matrix(path: str, D: np.ndarray) -> None:
    _write_bytes(path, np.ascontiguousarray(D, dtype="<f8").tobytes())


def read_matrix(path: str) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) % 8:
        raise CorruptFileError(path, "size is not a multiple of 8 bytes")
    count = len(data) // 8
    n = math.isqrt(count)
    if n * n != count:
        raise CorruptFileError(path, f"{count} values do not form a square matrix")
    return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(n, n)


# ---------------------------------------------------------------------------
# Index container
# ---------------------------------------------------------------------------
def _u32_or_none(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr, dtype=np.int64).copy()
    out[out < 0] = NONE_U32
    return out


def _from_u32(arr: np.ndarray) -> np.ndarray:
    out = arr.astype(np.int64)
    out[out == NONE_U32] = -1
    return out


def _write_layer(w: _Writer, layer: Layer, n_points: int) -> None:
    m, dim = layer.centers.shape
    w.pack("<II", m, n_points)
    w.array(layer.centers, "<f8")
    w.array(layer.assignment, "<u4")
    w.array(layer.parent, "<u4")
    w.array(_u32_or_none(layer.anchor_child), "<u4")
    w.array(layer.anchor_dist, "<f8")
    w.array(layer.up_cost, "<f8")
    w.array(layer.up_fallback, "u1")
    w.array(layer.leaf, "u1")
    w.pack("<I", len(layer.groups))
    for grp in layer.groups:
        g = grp.graph
        w.pack("<III", NONE_U32 if grp.parent < 0 else grp.parent, len(grp.members), g.neighbor_count)
        w.array(grp.members, "<u4")
        edges = np.zeros(g.edge_count, dtype=EDGE_DTYPE)
        edges["u"], edges["v"], edges["w"] = g.src, g.dst, g.weight
        w.pack("<I", g.edge_count)
        w.parts.append(edges.tobytes())
        w.array(grp.apsp, "<f8")


def _read_layer(r: _Reader, dim: int, epsilon: Optional[float]) -> Layer:
    m, n_points = r.unpack("<II")
    centers = r.array("<f8", m * dim, (m, dim))
    assignment = r.array("<u4", n_points).astype(np.int64)
    parent = r.array("<u4", m).astype(np.int64)
    anchor = _from_u32(r.array("<u4", m))
    anchor_dist = r.array("<f8", m)
    up_cost = r.array("<f8", m)
    up_fallback = r.array("u1", m).astype(bool)
    leaf = r.array("u1", m).astype(bool)
    groups = []
    for _ in range(r.u32()):
        gparent, size, sigma = r.unpack("<III")
        members = r.array("<u4", size).astype(np.int64)
        n_edges = r.u32()
        edges = r.array(EDGE_DTYPE, n_edges)
        graph = KnnGraph(size, edges["u"].astype(np.int64), edges["v"].astype(np.int64),
                         edges["w"].astype(np.float64), sigma, epsilon)
        apsp = r.array("<f8", size * size, (size, size))
        groups.append(CenterGroup(-1 if gparent == NONE_U32 else gparent, members, graph, apsp))
    if len(assignment) and assignment.max() >= m:
        raise CorruptFileError(r.path, "assignment refers to a missing centre")
    layer = _finish_layer(centers, assignment, parent, groups)
    layer.anchor_child[:] = anchor
    layer.anchor_dist[:] = anchor_dist
    layer.up_cost[:] = up_cost
    layer.up_fallback[:] = up_fallback
    layer.leaf[:] = leaf
    return layer


def _write_pool(w: _Writer, pool: FeaturePool, aux: AuxQueues) -> None:
    w.parts.append(POOL_MAGIC)
    w.pack("<IIIQQQQQQ", pool.capacity, pool.dim, aux.n_bottom, pool.rebuild_period,
           pool.write_cursor, pool.filled, pool.epoch_counter, pool.rebuild_count, pool.next_seq)
    w.pack("<Q", pool.slots_since_rebuild)
    w.array(pool.storage, "<f8")
    w.array(pool.write_seq, "<i8")
    w.array(aux.bottom_center_index, "<u4")
    w.array(aux.bottom_center_dist, "<f8")
    w.array(aux.d_o_rows, "<f8")


def _read_pool(r: _Reader) -> Tuple[FeaturePool, AuxQueues]:
    if bytes(r.data[r.pos:r.pos + 4]) != POOL_MAGIC:
        raise CorruptFileError(r.path, "unknown trailing section")
    r.pos += 4
    capacity, dim, nb, period, cursor, filled, epoch, rebuilds, next_seq = r.unpack("<IIIQQQQQQ")
    (since,) = r.unpack("<Q")
    if cursor >= max(capacity, 1) or filled > capacity or epoch < 1:
        raise CorruptFileError(r.path, f"pool counters out of range (cursor {cursor}, filled {filled}, "
                                       f"capacity {capacity}, step {epoch})")
    try:
        pool = FeaturePool(capacity, dim, int(period))
        aux = AuxQueues(capacity, nb)
    except PoolError as e:
        raise CorruptFileError(r.path, f"bad pool section: {e}") from e
    pool.write_cursor = int(cursor)
    pool.filled = int(filled)
    pool.epoch_counter = int(epoch)
    pool.rebuild_count = int(rebuilds)
    pool.next_seq = int(next_seq)
    pool.slots_since_rebuild = int(since)
    pool.storage = r.array("<f8", capacity * dim, (capacity, dim))
    pool.write_seq = r.array("<i8", capacity)
    aux.bottom_center_index = r.array("<u4", capacity).astype(np.int64)
    aux.bottom_center_dist = r.array("<f8", capacity)
    aux.d_o_rows = r.array("<f8", capacity * nb, (capacity, nb))
    return pool, aux


def write_index(
    path: str,
    idx: HierarchicalIndex,
    pool: Optional[FeaturePool] = None,
    aux: Optional[AuxQueues] = None,
) -> None:
    n = idx.point_count
    L = len(idx.layers)
    w = _Writer()
    w.pack(HEADER.format, INDEX_MAGIC, INDEX_VERSION, idx.dim, L)
    header = {
        "config": idx.config.to_trace_dict(),
        "warnings": idx.warnings,
        "warmup": idx.warmup,
        "point_count": n,
    }
    w.blob(json.dumps(header, sort_keys=True).encode("utf-8"))
    for layer in idx.layers:
        _write_layer(w, layer, n)
    nb = len(idx.bottom_centers)
    w.pack("<II", n, nb)
    w.array(idx.climb, "<f8")
    w.array(idx.point_to_bottom_center, "<u4")
    w.array(idx.point_to_bottom_dist, "<f8")
    w.array(idx.bottom_center_dist, "<f8")
    w.array(idx.d_o, "<f8")
    w.array(idx.points, "<f8")
    if pool is not None and aux is not None:
        _write_pool(w, pool, aux)
    _write_bytes(path, w.getvalue())
    log_event(logger, logging.INFO, EventType.FILE_SAVED, "index written",
              path=path, points=n, layers=L, with_pool=pool is not None,
              bytes=os.path.getsize(path))


def read_index(path: str) -> Tuple[HierarchicalIndex, Optional[FeaturePool], Optional[AuxQueues]]:
    r = _Reader(_read_bytes(path), path)
    dim, L = _check_header(r, INDEX_MAGIC, INDEX_VERSION)
    try:
        header = json.loads(r.blob().decode("utf-8"))
        config = HierarchyConfig.from_trace_dict(header["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise CorruptFileError(path, f"bad header block: {e}") from e
    if L < 1:
        raise CorruptFileError(path, "index has no layers")
    layers = [_read_layer(r, dim, config.epsilon) for _ in range(L)]
    n, nb = r.unpack("<II")
    if n != header.get("point_count") or nb != layers[-1].center_count:
        raise CorruptFileError(path, "point tables disagree with the header")
    climb = r.array("<f8", n * L, (n, L))
    K = r.array("<u4", n).astype(np.int64)
    bottom_dist = r.array("<f8", n)
    B = r.array("<f8", nb * nb, (nb, nb))
    d_o = r.array("<f8", n * nb, (n, nb))
    points = r.array("<f8", n * dim, (n, dim))
    pool = aux = None
    if r.remaining:
        pool, aux = _read_pool(r)
        if pool.dim != dim or aux.n_bottom != nb:
            raise CorruptFileError(path, "pool section does not match the index")
        if r.remaining:
            raise CorruptFileError(path, f"{r.remaining} unexpected trailing bytes")
    idx = HierarchicalIndex(
        config=config,
        layers=layers,
        climb=climb,
        point_to_bottom_center=K,
        point_to_bottom_dist=bottom_dist,
        bottom_center_dist=B,
        d_o=d_o,
        points=points,
        warnings=list(header.get("warnings", [])),
        warmup=bool(header.get("warmup", False)),
    )
    log_event(logger, logging.DEBUG, EventType.FILE_LOADED, "index read",
              path=path, points=n, layers=L, with_pool=pool is not None)
    return idx, pool, aux
