"""Data-owner ingestion: embeddings files, share databases, synthetic corpora.

Embeddings file: ``N*m`` little-endian float64 values (row-major) in
``<name>`` plus a text sidecar ``<name>.shape`` holding ``"N m"``.

Share database (one file per server, little-endian)::

    magic "P2DB" | version u16 | party u8 | flags u8 | N u64 | m u32 | f u8 | pad 3B
    | p u64 | l u64 | shares N*m*16B | [doc-mask differences N*m*16B] | sha256 32B

``flags`` bit 0 marks the presence of the doc-mask differences ``e = x - r^b``,
which the servers compute once against the dealer's static masks.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dot, wide
from .errors import CorruptBundleError, FieldRangeError, IngestionError, WrongPartyError
from .field import FieldParams
from .prg import as_rng

DB_MAGIC = b"P2DB"
DB_VERSION = 1
_DB_HDR = struct.Struct("<4sHBBQIB3xQQ")
_HAS_MASKS = 1


def write_embeddings(path, X: np.ndarray) -> Path:
    path = Path(path)
    X = np.ascontiguousarray(X, dtype="<f8")
    if X.ndim != 2:
        raise IngestionError("embeddings must be a 2-D matrix")
    path.write_bytes(X.tobytes())
    Path(str(path) + ".shape").write_text(f"{X.shape[0]} {X.shape[1]}\n")
    return path


def read_embeddings(path) -> np.ndarray:
    path = Path(path)
    sidecar = Path(str(path) + ".shape")
    try:
        N, m = (int(t) for t in sidecar.read_text().split())
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read shape sidecar {sidecar}: {exc}") from exc
    data = path.read_bytes()
    if len(data) != 8 * N * m:
        raise IngestionError(f"{path} holds {len(data)} bytes, sidecar says {N}x{m} float64")
    return np.frombuffer(data, dtype="<f8").reshape(N, m).copy()


def csv_to_embeddings(csv_path, out_path) -> Path:
    """Convert comma-separated rows of floats into the binary embeddings format."""
    with open(csv_path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    if not rows or len({len(r) for r in rows}) != 1:
        raise IngestionError("CSV rows must be non-empty and of equal length")
    return write_embeddings(out_path, np.array(rows))


def read_vector(path) -> np.ndarray:
    """A single embedding from a binary float64 file or a whitespace/comma text list."""
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("ascii")
        vals = [float(t) for t in text.replace(",", " ").split()]
        if vals:
            return np.array(vals)
    except (UnicodeDecodeError, ValueError):
        pass
    if len(raw) % 8:
        raise IngestionError(f"{path} is neither a float list nor raw float64")
    return np.frombuffer(raw, dtype="<f8").copy()


@dataclass(frozen=True, eq=False)
class ShareDatabase:
    """One server's shares of the document embeddings."""

    party: int
    params: FieldParams
    shares: np.ndarray  # (N, m, L) wide-ring shares
    doc_masks: np.ndarray | None = None  # (N, m, L) public e = x - r^b

    @property
    def N(self) -> int:
        return self.shares.shape[0]

    @property
    def m(self) -> int:
        return self.shares.shape[1]

    @property
    def norm(self) -> int:
        return self.params.scale

    def with_doc_masks(self, e: np.ndarray) -> "ShareDatabase":
        if e.shape != self.shares.shape:
            raise IngestionError(f"doc-mask matrix {e.shape[:2]} does not match {self.shares.shape[:2]}")
        return replace(self, doc_masks=e)

    def to_bytes(self) -> bytes:
        p = self.params
        flags = _HAS_MASKS if self.doc_masks is not None else 0
        body = _DB_HDR.pack(DB_MAGIC, DB_VERSION, self.party, flags, self.N, self.m, p.f, p.p, self.norm)
        body += wide.pack(self.shares)
        if self.doc_masks is not None:
            body += wide.pack(self.doc_masks)
        return body + hashlib.sha256(body).digest()

    def save(self, path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def from_bytes(cls, data: bytes, party: int, n: int | None = None) -> "ShareDatabase":
        if len(data) < _DB_HDR.size + 32:
            raise CorruptBundleError("share database shorter than its header")
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise CorruptBundleError("share database checksum mismatch")
        magic, version, file_party, flags, N, m, f, p, _ = _DB_HDR.unpack_from(body)
        if magic != DB_MAGIC or version != DB_VERSION:
            raise CorruptBundleError("not a share database (bad magic or version)")
        if file_party != party:
            raise WrongPartyError(f"share database belongs to party {file_party}, not {party}")
        params = FieldParams(p, f, n if n is not None else 64)
        size = N * m * wide.ELEM_BYTES
        off = _DB_HDR.size
        expect = off + size * (2 if flags & _HAS_MASKS else 1)
        if len(body) != expect:
            raise CorruptBundleError("share database size does not match its header")
        shares = wide.unpack(body[off : off + size], (N, m))
        masks = wide.unpack(body[off + size :], (N, m)) if flags & _HAS_MASKS else None
        return cls(party, params, shares, masks)

    @classmethod
    def load(cls, path, party: int, n: int | None = None) -> "ShareDatabase":
        return cls.from_bytes(Path(path).read_bytes(), party, n)


@dataclass(frozen=True)
class PublicMeta:
    N: int
    m: int
    f: int
    p: int
    norm: int


def normalize_rows(X: np.ndarray, renormalize: bool = False, tol: float = 1e-3) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise IngestionError("embeddings must be a non-empty N x m matrix")
    if not np.all(np.isfinite(X)):
        raise IngestionError("embeddings contain NaN or Inf")
    norms = np.linalg.norm(X, axis=1)
    bad = np.abs(norms - 1.0) > tol
    if np.any(bad):
        if not renormalize:
            raise IngestionError(f"{int(bad.sum())} rows are not unit-norm within {tol} (pass renormalize=True)")
        if np.any(norms == 0):
            raise IngestionError("cannot renormalize a zero row")
        X = X / norms[:, None]
    return X


def ingest(embeddings, params: FieldParams | None = None, rng=None, renormalize: bool = False):
    """Encode and share a matrix (or embeddings file) for the two servers."""
    params = params or FieldParams()
    X = read_embeddings(embeddings) if isinstance(embeddings, (str, Path)) else embeddings
    X = normalize_rows(X, renormalize)
    params.check_capacity(X.shape[0] + 1)
    try:
        enc = dot.encode_wide(params, X)
    except FieldRangeError as exc:
        raise IngestionError(str(exc)) from exc
    x0 = wide.random(as_rng(rng), X.shape)
    x1 = wide.sub(enc, x0)
    meta = PublicMeta(X.shape[0], X.shape[1], params.f, params.p, params.scale)
    return ShareDatabase(0, params, x0), ShareDatabase(1, params, x1), meta


def reconstruct_database(db0: ShareDatabase, db1: ShareDatabase) -> np.ndarray:
    """Signed fixed-point integers of the shared embeddings (testing aid)."""
    return wide.to_signed(wide.add(db0.shares, db1.shares)).astype(np.int64)


@dataclass(frozen=True)
class SynthData:
    X: np.ndarray
    prompt: np.ndarray


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def synth_dataset(N: int, m: int, seed: int = 0, kind: str = "random", duplicates: int = 0) -> SynthData:
    """Deterministic unit-norm documents and a prompt.

    ``kind="random"``: iid Gaussian directions.  ``kind="spread"``: cosines to
    the prompt evenly spaced over ``(-1, 1)`` (distinct, gap ``2/N``) in
    shuffled order; the gaps make the exact top-k unambiguous.
    ``duplicates > 1`` copies the document most similar to the prompt into
    that many rows, creating an exact tie.
    """
    rng = np.random.default_rng(seed)
    if kind == "random":
        X = _unit(rng.standard_normal((N, m)))
        u = _unit(rng.standard_normal(m))
    elif kind == "spread":
        if m < 2:
            raise IngestionError("spread datasets need m >= 2")
        u = _unit(rng.standard_normal(m))
        V = rng.standard_normal((N, m))
        V -= np.outer(V @ u, u)
        V = _unit(V)
        c = -1.0 + (2.0 * np.arange(N) + 1.0) / N
        c = rng.permutation(c)
        X = c[:, None] * u[None, :] + np.sqrt(1.0 - c**2)[:, None] * V
        X = _unit(X)
    else:
        raise IngestionError(f"unknown synthetic dataset kind {kind!r}")
    if duplicates > 1:
        if duplicates > N:
            raise IngestionError("more duplicates than documents")
        order = np.argsort(-(X @ u), kind="stable")
        X[order[1:duplicates]] = X[order[0]]
    return SynthData(X, u)
