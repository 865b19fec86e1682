"""Offline trusted dealer and the per-server correlated-randomness bundle.

Bundle file layout (all integers little-endian)::

    magic "P2RG" | version u16 | party u8 | reserved u8 | bundle id 16B
    parameter block  p u64, f u8, n u8, lambda u16, m u32, N u64,
                     c_m u64, step_m u32, xi u32, queries u32, first_query u32
    section count u32
    section table    count x (kind u16, query u32, offset u64, length u64, crc32 u32)
    header crc32 u32 (over everything above)
    sections

Section kinds:

* ``RB``  static document masks ``r^b``: ``N*m`` wide elements (16 B each).
* ``DOT`` per query: ``r^a`` (m wide) | ``rab`` (N wide) | ``R`` (N wide) | ``Rt`` (N u64).
* ``BIN`` per query: ``N`` gate-key records for ``[0, 2)``.
* ``CNT`` per query: one gate-key record for ``[0, c_m + 1)``.

Consumed query slots are tracked in ``<bundle>.cursor`` (one byte per slot),
written atomically and fsync'd before the material is handed out.
"""

from __future__ import annotations

import io
import mmap
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dot, gate, wide
from .errors import ConfigurationError, CorruptBundleError, MaterialExhaustedError, WrongPartyError
from .field import FieldParams, random_elements, vadd, vsub
from .dcf import LAMBDA as LAMBDA_BITS
from .prg import SeededRandomness

MAGIC = b"P2RG"
VERSION = 1
DEFAULT_MAX_BYTES = 16 * 2**30
KEY_CHUNK = 8192

_HDR = struct.Struct("<4sHBB16s")
_PARAMS = struct.Struct("<QBBHIQQIIII")
_COUNT = struct.Struct("<I")
_SECT = struct.Struct("<HIQQI")
_CRC = struct.Struct("<I")

RB, DOT, BIN, CNT = 1, 2, 3, 4
_STATIC = 0xFFFFFFFF
_U64 = np.dtype("<u8")


@dataclass(frozen=True)
class BundleMeta:
    N: int
    m: int
    c_m: int
    step_m: int
    xi: int
    queries: int
    first_query: int
    bundle_id: bytes


def _dot_size(N: int, m: int) -> int:
    return wide.ELEM_BYTES * (m + 2 * N) + 8 * N


def _layout(params: FieldParams, N: int, m: int, queries: int):
    ks = gate.cmp_key_size(params.n)
    sections = [(RB, _STATIC, wide.ELEM_BYTES * N * m)]
    for q in range(queries):
        sections += [(DOT, q, _dot_size(N, m)), (BIN, q, N * ks), (CNT, q, ks)]
    header = _HDR.size + _PARAMS.size + _COUNT.size + _SECT.size * len(sections) + _CRC.size
    table, off = [], header
    for kind, q, length in sections:
        table.append([kind, q, off, length, 0])
        off += length
    return header, table, off


class _SectionWriter:
    """Streams both parties' sections, accumulating CRCs."""

    def __init__(self, sinks, table):
        self.sinks = sinks
        self.table = table
        self.idx = -1
        self.written = 0

    def begin(self, kind, q):
        self.idx += 1
        ent = self.table[0][self.idx]
        assert (ent[0], ent[1]) == (kind, q)
        self.written = 0

    def write(self, chunk0: bytes, chunk1: bytes):
        for party, chunk in ((0, chunk0), (1, chunk1)):
            ent = self.table[party][self.idx]
            ent[4] = zlib.crc32(chunk, ent[4])
            self.sinks[party].write(chunk)
        self.written += len(chunk0)

    def end(self):
        assert self.written == self.table[0][self.idx][3]


def _header_bytes(params, party, bundle_id, meta_fields, table) -> bytes:
    buf = _HDR.pack(MAGIC, VERSION, party, 0, bundle_id)
    buf += _PARAMS.pack(params.p, params.f, params.n, LAMBDA_BITS, *meta_fields)
    buf += _COUNT.pack(len(table))
    for ent in table:
        buf += _SECT.pack(*ent)
    return buf + _CRC.pack(zlib.crc32(buf))


def _share_wide(rng, x):
    x0 = wide.random(rng, x.shape[:-1])
    return x0, wide.sub(x, x0)


def _share_fp(params, rng, x):
    x0 = random_elements(params, rng, x.size)
    return x0, vsub(params, x, x0)


def dealer_generate(
    params: FieldParams,
    N: int,
    m: int,
    queries: int,
    seed,
    c_m: int,
    step_m: int,
    xi: int,
    first_query: int = 0,
    paths=None,
    max_bytes: int = DEFAULT_MAX_BYTES,
    keep_plaintext: bool = False,
):
    """Generate both servers' bundles; deterministic for a fixed ``seed``.

    With ``paths=(path0, path1)`` the bundles are written to disk and loaded
    back; otherwise they live in memory.  ``keep_plaintext`` attaches the
    dealer's plaintext values to both bundles (tests only).
    """
    if queries < 1 or N < 1 or m < 1:
        raise ConfigurationError("need queries, N and m all >= 1")
    if step_m < 1 or c_m < 1:
        raise ConfigurationError("need step_m >= 1 and c_m >= 1")
    params.check_capacity(N + 1)
    if c_m + 1 > params.p:
        raise ConfigurationError("c_m must be below p")
    dot.check_ring(params)
    header, table, total = _layout(params, N, m, queries)
    if total > max_bytes:
        raise ConfigurationError(f"bundle would be {total} bytes, above the {max_bytes}-byte limit")

    master = SeededRandomness(seed, "dealer")
    bundle_id = master.bytes(16)
    meta_fields = (m, N, c_m, step_m, xi, queries, first_query)
    tables = [[list(e) for e in table], [list(e) for e in table]]

    if paths is None:
        sinks = [io.BytesIO(), io.BytesIO()]
    else:
        paths = [Path(p) for p in paths]
        sinks = [open(p, "wb") for p in paths]
    plain: dict = {} if keep_plaintext else None
    try:
        for s in sinks:
            s.write(bytes(header))
        w = _SectionWriter(sinks, tables)

        rng = master.child("rb")
        rb = wide.random(rng, (N, m))
        rb0, rb1 = _share_wide(rng, rb)
        w.begin(RB, _STATIC)
        w.write(wide.pack(rb0), wide.pack(rb1))
        w.end()
        if plain is not None:
            plain["rb"] = rb

        B = dot.trunc_bits(params)
        for q in range(queries):
            rng = master.child(f"query-{first_query + q}")
            ra = wide.random(rng, m)
            rab = wide.matvec(rb, ra)
            R_int = np.frombuffer(rng.bytes(16 * N), dtype=_U64).reshape(N, 2).astype(object)
            R_int = (R_int[:, 0] + (R_int[:, 1] << 64)) % (1 << (B + dot.KAPPA))
            R = wide.from_int(R_int)
            Rt = ((R_int >> params.f) % params.p).astype(_U64)
            ra0, ra1 = _share_wide(rng, ra)
            rab0, rab1 = _share_wide(rng, rab)
            R0, R1 = _share_wide(rng, R)
            Rt0, Rt1 = _share_fp(params, rng, Rt)
            _self_check_dot(params, (rb0, rb1), (ra0, ra1), (rab0, rab1), (R0, R1), (Rt0, Rt1))
            w.begin(DOT, q)
            w.write(
                wide.pack(ra0) + wide.pack(rab0) + wide.pack(R0) + Rt0.tobytes(),
                wide.pack(ra1) + wide.pack(rab1) + wide.pack(R1) + Rt1.tobytes(),
            )
            w.end()

            w.begin(BIN, q)
            for start in range(0, N, KEY_CHUNK):
                cnt = min(KEY_CHUNK, N - start)
                k0, k1 = gate.cmp_gen(params, np.zeros(cnt, dtype=object), np.full(cnt, 2, dtype=object), rng)
                if start == 0:
                    _self_check_gate(params, k0[0], k1[0], [0, 1, 2], [1, 1, 0])
                w.write(gate.cmp_key_serialize(k0), gate.cmp_key_serialize(k1))
            w.end()

            k0, k1 = gate.cmp_gen(params, 0, c_m + 1, rng)
            _self_check_gate(params, k0, k1, [0, c_m, c_m + 1], [1, 1, 0])
            w.begin(CNT, q)
            w.write(gate.cmp_key_serialize(k0), gate.cmp_key_serialize(k1))
            w.end()
            if plain is not None:
                plain[q] = {"ra": ra, "rab": rab, "R": R_int, "Rt": Rt}

        for party in (0, 1):
            sinks[party].seek(0)
            sinks[party].write(_header_bytes(params, party, bundle_id, meta_fields, tables[party]))
        if paths is None:
            bundles = tuple(OfflineBundle(sinks[p].getvalue(), p) for p in (0, 1))
        else:
            for s in sinks:
                s.flush()
                os.fsync(s.fileno())
    finally:
        if paths is not None:
            for s in sinks:
                s.close()
    if paths is not None:
        bundles = tuple(bundle_load(paths[p], p) for p in (0, 1))
    if plain is not None:
        for b in bundles:
            b.plaintext = plain
    return bundles


def _self_check_dot(params, rb, ra, rab, R, Rt):
    rb_, ra_ = wide.add(*rb), wide.add(*ra)
    if not np.array_equal(wide.add(*rab), wide.matvec(rb_, ra_)):
        raise AssertionError("dealer self-check: rab != r^a . r^b")
    R_int = wide.to_int(wide.add(*R))
    if not np.array_equal(vadd(params, *Rt), ((R_int >> params.f) % params.p).astype(_U64)):
        raise AssertionError("dealer self-check: Rt != floor(R / 2^f)")


def _self_check_gate(params, k0, k1, xs, expected):
    for x, y in zip(xs, expected):
        xhat = np.array([(x + int(k0.r[0]) + int(k1.r[0])) % params.p], dtype=_U64)
        got = vadd(params, gate.cmp_eval_finish(params, k0, xhat), gate.cmp_eval_finish(params, k1, xhat))
        if int(got[0]) != y:
            raise AssertionError(f"dealer self-check: gate at {x} gave {int(got[0])}, expected {y}")


@dataclass(eq=False)
class QueryMaterial:
    """One query slot's share of the offline material (lazy key access)."""

    bundle: "OfflineBundle"
    index: int
    dot: dot.DotCorrelation
    _bin: np.ndarray = field(repr=False)
    _cnt: bytes = field(repr=False)

    @property
    def n_binary(self) -> int:
        return len(self._bin) // gate.cmp_key_size(self.bundle.params.n)

    def binary_keys(self, start: int = 0, stop: int | None = None) -> gate.CmpKey:
        ks = gate.cmp_key_size(self.bundle.params.n)
        stop = self.n_binary if stop is None else stop
        return gate.cmp_key_deserialize(bytes(self._bin[start * ks : stop * ks]), self.bundle.params)

    def count_key(self) -> gate.CmpKey:
        return gate.cmp_key_deserialize(self._cnt, self.bundle.params, 1)


class OfflineBundle:
    """Read-only view of one party's bundle plus its consumption record."""

    plaintext = None

    def __init__(self, data, party: int, path: Path | None = None):
        self._data = data
        self._view = memoryview(data)
        self.path = path
        self._lock = threading.Lock()
        self._parse(party)
        self._used = self._read_cursor()
        self._checked: set = set()

    # -- parsing -------------------------------------------------------------

    def _parse(self, party: int):
        v = self._view
        if len(v) < _HDR.size + _PARAMS.size + _COUNT.size:
            raise CorruptBundleError("bundle shorter than its header")
        magic, version, file_party, _, bid = _HDR.unpack_from(v, 0)
        if magic != MAGIC:
            raise CorruptBundleError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptBundleError(f"unsupported bundle version {version}")
        off = _HDR.size
        p, f, n, lam, m, N, c_m, step_m, xi, queries, first = _PARAMS.unpack_from(v, off)
        off += _PARAMS.size
        (count,) = _COUNT.unpack_from(v, off)
        off += _COUNT.size
        end = off + count * _SECT.size
        if end + _CRC.size > len(v):
            raise CorruptBundleError("section table truncated")
        (crc,) = _CRC.unpack_from(v, end)
        if zlib.crc32(v[:end]) != crc:
            raise CorruptBundleError("header checksum mismatch")
        if file_party != party:
            raise WrongPartyError(f"bundle belongs to party {file_party}, not {party}")
        if lam != LAMBDA_BITS:
            raise CorruptBundleError(f"unsupported lambda {lam}")
        try:
            self.params = FieldParams(p, f, n)
        except ConfigurationError as exc:
            raise CorruptBundleError(str(exc)) from exc
        self.party = party
        self.meta = BundleMeta(N, m, c_m, step_m, xi, queries, first, bytes(bid))
        self._sections = {}
        for i in range(count):
            kind, q, s_off, length, s_crc = _SECT.unpack_from(v, off + i * _SECT.size)
            if s_off + length > len(v):
                raise CorruptBundleError("section extends past end of file")
            self._sections[(kind, q)] = (s_off, length, s_crc)
        _, _, expected = _layout(self.params, N, m, queries)
        if len(v) != expected or len(self._sections) != count:
            raise CorruptBundleError("bundle size does not match its parameter block")

    def _section(self, kind: int, q: int) -> memoryview:
        try:
            off, length, crc = self._sections[(kind, q)]
        except KeyError:
            raise CorruptBundleError(f"missing section {kind} for query {q}") from None
        sect = self._view[off : off + length]
        if (kind, q) not in self._checked:
            if zlib.crc32(sect) != crc:
                raise CorruptBundleError(f"checksum mismatch in section {kind} for query {q}")
            self._checked.add((kind, q))
        return sect

    # -- consumption -----------------------------------------------------------

    @property
    def cursor_path(self) -> Path | None:
        return None if self.path is None else self.path.with_name(self.path.name + ".cursor")

    def _read_cursor(self) -> bytearray:
        q = self.meta.queries
        cp = self.cursor_path
        if cp is None or not cp.exists():
            return bytearray(q)
        data = bytearray(cp.read_bytes())
        if len(data) != q:
            raise CorruptBundleError("cursor file does not match bundle capacity")
        return data

    def _persist(self):
        cp = self.cursor_path
        if cp is None:
            return
        tmp = cp.with_name(cp.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(self._used)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, cp)
        dfd = os.open(cp.parent, os.O_RDONLY)
        try:
            os.fsync(dfd)
        finally:
            os.close(dfd)

    @property
    def remaining(self) -> int:
        return self.meta.queries - sum(self._used)

    def static_rb(self) -> np.ndarray:
        return wide.unpack(bytes(self._section(RB, _STATIC)), (self.meta.N, self.meta.m))

    def acquire_query(self, index: int | None = None) -> QueryMaterial:
        """Mark a query slot consumed (durably) and return its material.

        ``index`` is a global query number (``first_query`` based); ``None``
        takes the lowest unused slot.
        """
        with self._lock:
            if index is None:
                try:
                    slot = self._used.index(0)
                except ValueError:
                    raise MaterialExhaustedError("all provisioned query slots are consumed") from None
            else:
                slot = index - self.meta.first_query
                if not 0 <= slot < self.meta.queries:
                    raise MaterialExhaustedError(f"query slot {index} was not provisioned")
                if self._used[slot]:
                    raise MaterialExhaustedError(f"query slot {index} was already consumed")
            self._used[slot] = 1
            self._persist()
        return self._material(slot)

    def _material(self, slot: int) -> QueryMaterial:
        N, m = self.meta.N, self.meta.m
        d = self._section(DOT, slot)
        E = wide.ELEM_BYTES
        ra = wide.unpack(bytes(d[: m * E]), m)
        o = m * E
        rab = wide.unpack(bytes(d[o : o + N * E]), N)
        o += N * E
        R = wide.unpack(bytes(d[o : o + N * E]), N)
        o += N * E
        Rt = np.frombuffer(bytes(d[o : o + 8 * N]), dtype=_U64).copy()
        if np.any(Rt >= np.uint64(self.params.p)):
            raise CorruptBundleError("truncation share outside the field")
        corr = dot.DotCorrelation(self.party, ra, rab, R, Rt)
        return QueryMaterial(
            self, self.meta.first_query + slot, corr, self._section(BIN, slot), bytes(self._section(CNT, slot))
        )


def bundle_load(path, party: int) -> OfflineBundle:
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CorruptBundleError(f"cannot open bundle {path}: {exc}") from exc
    with fh:
        try:
            data = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
        except ValueError as exc:
            raise CorruptBundleError(f"empty bundle file {path}") from exc
    return OfflineBundle(data, party, path)
