import numpy as np
import pytest

from fssrag import wide
from fssrag.dealer import bundle_load, dealer_generate
from fssrag.errors import ConfigurationError, CorruptBundleError, MaterialExhaustedError, WrongPartyError
from fssrag.field import vadd
from fssrag.gate import cmp_eval_finish, cmp_eval_mask


@pytest.fixture
def bundles(big, tmp_path):
    paths = (tmp_path / "b0.p2rg", tmp_path / "b1.p2rg")
    return dealer_generate(big, 6, 4, 3, 11, 5, 9, 2, paths=paths, keep_plaintext=True), paths


def test_deterministic_output(big, tmp_path):
    a = dealer_generate(big, 3, 2, 1, 7, 3, 4, 0, paths=(tmp_path / "a0", tmp_path / "a1"))
    b = dealer_generate(big, 3, 2, 1, 7, 3, 4, 0, paths=(tmp_path / "c0", tmp_path / "c1"))
    assert (tmp_path / "a0").read_bytes() == (tmp_path / "c0").read_bytes()
    assert (tmp_path / "a1").read_bytes() == (tmp_path / "c1").read_bytes()
    assert a[0].meta == b[0].meta
    c = dealer_generate(big, 3, 2, 1, 8, 3, 4, 0)
    assert c[0].meta.bundle_id != a[0].meta.bundle_id


def test_metadata_and_correlations(big, bundles):
    (b0, b1), _ = bundles
    assert (b0.meta.N, b0.meta.m, b0.meta.c_m, b0.meta.step_m, b0.meta.xi, b0.meta.queries) == (6, 4, 5, 9, 2, 3)
    plain = b0.plaintext
    assert np.array_equal(wide.add(b0.static_rb(), b1.static_rb()), plain["rb"])
    m0, m1 = b0.acquire_query(), b1.acquire_query(0)
    assert m0.index == m1.index == 0
    ra = wide.add(m0.dot.ra, m1.dot.ra)
    rab = wide.add(m0.dot.rab, m1.dot.rab)
    assert np.array_equal(ra, plain[0]["ra"])
    assert np.array_equal(rab, wide.matvec(plain["rb"], ra))
    R = wide.to_int(wide.add(m0.dot.R, m1.dot.R))
    assert np.all(R < 1 << (2 * big.f + 2 + 56))
    Rt = vadd(big, m0.dot.Rt, m1.dot.Rt)
    assert [int(v) for v in Rt] == [(int(r) >> big.f) % big.p for r in R]


def test_offline_keys_are_correct_gates(big, bundles):
    (b0, b1), _ = bundles
    m0, m1 = b0.acquire_query(), b1.acquire_query(0)
    assert m0.n_binary == 6
    xs = np.array([0, 1, 2, 3, big.p - 1, 1], dtype=np.uint64)
    k0, k1 = m0.binary_keys(), m1.binary_keys()
    xhat = vadd(big, cmp_eval_mask(big, k0, xs), cmp_eval_mask(big, k1, np.zeros(6, dtype=np.uint64)))
    y = vadd(big, cmp_eval_finish(big, k0, xhat), cmp_eval_finish(big, k1, xhat))
    assert list(y) == [1, 1, 0, 0, 0, 1]
    c0, c1 = m0.count_key(), m1.count_key()
    cs = np.array([5], dtype=np.uint64)
    xhat = vadd(big, cmp_eval_mask(big, c0, cs), cmp_eval_mask(big, c1, np.zeros(1, dtype=np.uint64)))
    assert list(vadd(big, cmp_eval_finish(big, c0, xhat), cmp_eval_finish(big, c1, xhat))) == [1]


def test_slots_are_consumed_durably(big, bundles):
    (b0, _), paths = bundles
    b0.acquire_query()
    b0.acquire_query(2)
    with pytest.raises(MaterialExhaustedError):
        b0.acquire_query(2)
    reloaded = bundle_load(paths[0], 0)
    assert reloaded.remaining == 1
    assert reloaded.acquire_query().index == 1
    with pytest.raises(MaterialExhaustedError) as exc:
        reloaded.acquire_query()
    assert exc.value.code == "exhausted"
    with pytest.raises(MaterialExhaustedError):
        reloaded.acquire_query(7)


def test_wrong_party_and_corruption(big, bundles):
    (_, _), paths = bundles
    with pytest.raises(WrongPartyError):
        bundle_load(paths[0], 1)
    data = bytearray(paths[1].read_bytes())
    data[-10] ^= 0xFF  # inside the last CNT section
    paths[1].write_bytes(bytes(data))
    b1 = bundle_load(paths[1], 1)
    b1.acquire_query()  # DOT and BIN sections of slot 0 are intact
    with pytest.raises(CorruptBundleError):
        b1.acquire_query(2)
    data[20] ^= 0xFF  # header
    paths[1].write_bytes(bytes(data))
    with pytest.raises(CorruptBundleError):
        bundle_load(paths[1], 1)
    paths[1].write_bytes(bytes(data[:50]))
    with pytest.raises(CorruptBundleError):
        bundle_load(paths[1], 1)
    with pytest.raises(CorruptBundleError):
        bundle_load(paths[1].with_name("missing"), 1)


def test_parameter_validation(big):
    with pytest.raises(ConfigurationError):
        dealer_generate(big, 0, 4, 1, 0, 1, 1, 0)
    with pytest.raises(ConfigurationError):
        dealer_generate(big, 4, 4, 1, 0, 1, 0, 0)
    with pytest.raises(ConfigurationError):
        dealer_generate(big, 4, 4, 1, 0, 1, 1, 0, max_bytes=1000)
