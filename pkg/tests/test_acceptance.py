"""Exit criteria.  Each test carries ``@criterion(n, title)``; the terminal
summary prints one PASS/FAIL line per criterion with the measured values.

The N = 2^20 row of criterion 5 needs several GB per server and runs only
with ``FSSRAG_LARGE=1``.
"""

from __future__ import annotations

import math
import os
from fractions import Fraction

import numpy as np
import pytest
from sympy import prevprime

from adversary import abort_info, exchange, new_qid, prompt_frames, ray_keys
from fssrag import dcf, gate
from fssrag.client import BisectState, bisect_step, leakage_report, run_query
from fssrag.errors import ConfigurationError
from fssrag.field import FieldParams, vadd
from fssrag.harness import LocalCluster, bisection_bound, measure_recall, verify_traffic
from fssrag.ingest import synth_dataset
from fssrag.prg import SeededRandomness
from fssrag.wire import Frame, MsgType
from oracles import dcf_value

pytestmark = pytest.mark.acceptance
criterion = pytest.mark.criterion
LARGE = os.environ.get("FSSRAG_LARGE") == "1"


# -- 1. gate exhaustive ----------------------------------------------------------------

C1 = "gate equals 1{x in [x_l, x_r)} for every interval and input at p=251"


def _intervals(p):
    xl, xr = np.triu_indices(p + 1)  # 0 <= x_l <= x_r <= p
    keep = xl < p
    return xl[keep], xr[keep]


@criterion(1, C1)
def test_c1_gate_full_path_every_interval(small, record_property):
    """Every interval through cmp_gen / cmp_eval_mask / cmp_eval_finish, own mask each."""
    p = small.p
    xl, xr = _intervals(p)
    K = xl.size
    xs = np.arange(p, dtype=np.uint64)
    failures = 0
    for start in range(0, K, 2000):
        sl = slice(start, min(start + 2000, K))
        k0, k1 = gate.cmp_gen(small, xl[sl].astype(object), xr[sl].astype(object), SeededRandomness(start, "c1"))
        n = len(k0)
        idx = np.repeat(np.arange(n), p)
        x = np.tile(xs, n)
        x0 = SeededRandomness(start, "x").bytes(8 * x.size)
        s0 = np.frombuffer(x0, dtype=np.uint64) % np.uint64(p)
        s1 = (x + np.uint64(p) - s0) % np.uint64(p)
        b0, b1 = k0[idx], k1[idx]
        xhat = vadd(small, gate.cmp_eval_mask(small, b0, s0), gate.cmp_eval_mask(small, b1, s1))
        y = vadd(small, gate.cmp_eval_finish(small, b0, xhat), gate.cmp_eval_finish(small, b1, xhat))
        want = ((x >= xl[sl][idx]) & (x < xr[sl][idx])).astype(np.uint64)
        failures += int(np.sum(y != want))
    record_property("intervals", K)
    record_property("failures", failures)
    assert failures == 0


@criterion(1, C1)
def test_c1_gate_twenty_masks_every_interval(small, record_property):
    """20 masks per interval: real DCF keys per masked endpoint, combined per interval."""
    p = small.p
    xl, xr = _intervals(p)
    xs = np.arange(p, dtype=np.uint64)
    failures = 0
    for t in range(20):
        rng = SeededRandomness(t, "c1-mask")
        r = int(np.frombuffer(rng.bytes(8), dtype=np.uint64)[0] % np.uint64(p))
        ends = np.arange(p + 1)
        pts = ((ends + r) % p).astype(np.uint64)
        lo0, lo1 = dcf.dcf_gen(small, pts, np.full(p + 1, p - 1, dtype=np.uint64), rng)
        hi0, hi1 = dcf.dcf_gen(small, pts, np.ones(p + 1, dtype=np.uint64), rng)
        xhat = (xs + np.uint64(r)) % np.uint64(p)
        idx = np.repeat(np.arange(p + 1), p)
        xh = np.tile(xhat, p + 1)
        y_lo = vadd(small, dcf.dcf_eval(small, lo0[idx], xh), dcf.dcf_eval(small, lo1[idx], xh)).reshape(p + 1, p)
        y_hi = vadd(small, dcf.dcf_eval(small, hi0[idx], xh), dcf.dcf_eval(small, hi1[idx], xh)).reshape(p + 1, p)
        w = gate.wrap_correction(small, xl.astype(object), xr.astype(object), np.full(xl.size, r, dtype=np.uint64))
        y = gate.combine(small, y_lo[xl], y_hi[xr], w[:, None])
        want = (xs[None, :] >= xl[:, None].astype(np.uint64)) & (xs[None, :] < xr[:, None].astype(np.uint64))
        failures += int(np.sum(y != want.astype(np.uint64)))
    record_property("masks", 20)
    record_property("failures", failures)
    assert failures == 0


# -- 2. DCF ---------------------------------------------------------------------------------

C2 = "DCF shares sum to b*1{x<a}: exhaustive n<=10, sampled n=64"


@criterion(2, C2)
@pytest.mark.parametrize("n", range(2, 11))
def test_c2_dcf_exhaustive(n):
    p = int(prevprime(2**n + 1))
    fp = FieldParams(p, 0, n)
    X = 1 << n
    a = np.arange(X, dtype=np.uint64)
    b = np.frombuffer(SeededRandomness(n, "b").bytes(8 * X), dtype=np.uint64) % np.uint64(p)
    k0, k1 = dcf.dcf_gen(fp, a, b, SeededRandomness(n, "c2"))
    idx = np.repeat(np.arange(X), X)
    xs = np.tile(np.arange(X, dtype=np.uint64), X)
    y = vadd(fp, dcf.dcf_eval(fp, k0[idx], xs), dcf.dcf_eval(fp, k1[idx], xs)).reshape(X, X)
    want = np.where(xs.reshape(X, X) < a[:, None], b[:, None], np.uint64(0))
    assert int(np.sum(y != want)) == 0


@criterion(2, C2)
def test_c2_dcf_64_bit(big, record_property):
    rng = np.random.default_rng(2024)
    failures = checked = 0
    for t in range(5):
        a = int(rng.integers(0, 2**64, dtype=np.uint64, endpoint=False))
        b = int(rng.integers(0, big.p, dtype=np.uint64))
        k0, k1 = dcf.dcf_gen(big, a, b, SeededRandomness(t, "c2-64"))
        bounds = [x for x in (0, 1, a - 1, a, a + 1, 2**63, 2**64 - 1) if 0 <= x < 2**64]
        xs = np.concatenate([rng.integers(0, 2**64, 10_000, dtype=np.uint64, endpoint=False), np.array(bounds, dtype=np.uint64)])
        y = vadd(big, dcf.dcf_eval(big, k0, xs), dcf.dcf_eval(big, k1, xs))
        failures += sum(int(v) != dcf_value(a, b, int(x), big.p) for v, x in zip(y, xs))
        checked += xs.size
    record_property("points", checked)
    assert failures == 0


# -- 3. secure dot product -----------------------------------------------------------------

C3 = "secure dot within (m+1)2^-32 of exact; ranking preserved above 2(m+1)2^-32 gaps"


@criterion(3, C3)
@pytest.mark.parametrize("seed", range(3))
def test_c3_secure_dot(seed, record_property):
    N = m = 64
    data = synth_dataset(N, m, seed=100 + seed)
    with LocalCluster(data.X, queries=1, seed=seed, retain_distances=True) as c:
        res = c.query(data.prompt, 4, 4, rng=seed)
        dist = c.distances(res.qid)
    exact = [sum(Fraction(a) * Fraction(b) for a, b in zip(x, data.prompt)) for x in data.X]
    err = [abs(Fraction(int(d), 2**32) - e) for d, e in zip(dist, exact)]
    bound = Fraction(m + 1, 2**32)
    record_property("max_error_units", float(max(err) * 2**32))
    assert max(err) <= bound
    gap = 2 * bound
    order_ok = all(
        dist[i] > dist[j] for i in range(N) for j in range(N) if exact[i] - exact[j] > gap
    )
    assert order_ok


# -- 4. end-to-end recall ----------------------------------------------------------------

C4 = "recall >= 0.99 (random) and == 1.0 (gap-planted), N=2^13, m=256"


@pytest.fixture(scope="module")
def recall_clusters():
    out = {}
    for kind in ("random", "spread"):
        data = synth_dataset(2**13, 256, seed=4, kind=kind)
        out[kind] = (data, LocalCluster(data.X, queries=3, step_m=64, seed=4))
    yield out
    for _, c in out.values():
        c.close()


@criterion(4, C4)
@pytest.mark.parametrize("kind", ["random", "spread"])
@pytest.mark.parametrize("kprime", [16, 64, 256])
def test_c4_recall(recall_clusters, kind, kprime, record_property):
    data, cluster = recall_clusters[kind]
    k = kprime // 2
    res = cluster.query(data.prompt, k, kprime - k, rng=kprime)
    recall = measure_recall(res.indices, data.X, data.prompt)
    record_property("recall", recall)
    record_property("S", res.S)
    assert res.stopped == "rule" and k <= res.c <= kprime
    if kind == "spread":
        assert recall == 1.0
    else:
        assert recall >= 0.99


# -- 5. rounds --------------------------------------------------------------------------

C5 = "S = ceil(log2(N/k')) and RTT = S+1 at N=2^17 (2^20 gated)"


def _round_run(N, kprime, tmp_path, m=8):
    data = synth_dataset(N, m, seed=5, kind="spread")
    with LocalCluster(data.X, queries=1, seed=5, workdir=tmp_path) as c:
        return c.query(data.prompt, kprime // 2, kprime // 2, rng=N + kprime)


@criterion(5, C5)
@pytest.mark.slow
@pytest.mark.parametrize(
    "N,kprime,rtt",
    [
        (2**17, 16, 14),
        (2**17, 128, 11),
        pytest.param(2**20, 16, 17, marks=pytest.mark.skipif(not LARGE, reason="set FSSRAG_LARGE=1 (GB-scale)")),
    ],
)
def test_c5_round_counts(N, kprime, rtt, tmp_path, record_property):
    res = _round_run(N, kprime, tmp_path)
    record_property("S", res.S)
    record_property("RTT", res.rounds)
    assert res.stopped == "rule"
    assert res.S == bisection_bound(N, kprime)
    assert res.rounds == res.S + 1 == rtt


# -- 6. traffic ---------------------------------------------------------------------------

C6 = "prompt 16m, return 16N, intra-server 16N per iteration, all within 5%"


@criterion(6, C6)
def test_c6_traffic(record_property):
    N, m = 2**12, 1024
    data = synth_dataset(N, m, seed=6, kind="spread")
    with LocalCluster(data.X, queries=1, seed=6) as c:
        res = c.query(data.prompt, 8, 8, rng=6)
        terms = {t.name: t for t in verify_traffic(res, c.stats(res.qid), c.params, m)}
    for name in ("prompt_upload", "candidate_return", "intra_server_per_iteration"):
        t = terms[name]
        record_property(name, f"{t.measured:.0f}/{t.predicted:.0f}")
        assert t.ok, t
    key = terms["key_bytes_per_iteration"]
    record_property("key_bytes_per_iteration", f"{key.measured:.0f} (repo {key.predicted}, reference 4224)")
    assert key.ok
    assert terms["rtt"].ok


# -- 7. malicious user ----------------------------------------------------------------------

C7 = "servers abort on non-binary candidates and c > c_m; cap iterations at step_m"


@pytest.fixture(scope="module")
def small_corpus():
    return synth_dataset(64, 16, seed=7, kind="spread")


def _first_iteration(c, data, rigged=None):
    chans = c.connect()
    qid = new_qid()
    p0, p1 = prompt_frames(c.params, data.prompt, qid)
    k0, k1 = ray_keys(c.params, 0, rigged=rigged)
    exchange(chans, ([p0, Frame(MsgType.ITER_KEY, qid, k0)], [p1, Frame(MsgType.ITER_KEY, qid, k1)]))
    return chans, qid


@criterion(7, C7)
def test_c7a_binary_check(small_corpus):
    with LocalCluster(small_corpus.X, queries=1) as c:
        chans, qid = _first_iteration(c, small_corpus, rigged={"high_payload": 1, "w_extra": 1})
        fin = Frame(MsgType.FINALIZE, qid)
        replies = exchange(chans, ([fin], [fin]), until=(MsgType.DC_SHARE,))
    assert [abort_info(r)["reason"] for r in replies] == ["binary-check"] * 2


@criterion(7, C7)
def test_c7b_count_bound(small_corpus):
    with LocalCluster(small_corpus.X, queries=1, c_m=8) as c:
        chans, qid = _first_iteration(c, small_corpus)  # threshold 0 selects half the corpus
        fin = Frame(MsgType.FINALIZE, qid)
        replies = exchange(chans, ([fin], [fin]), until=(MsgType.DC_SHARE,))
    assert [abort_info(r)["reason"] for r in replies] == ["count-bound"] * 2


@criterion(7, C7)
def test_c7c_iteration_cap(small_corpus):
    with LocalCluster(small_corpus.X, queries=1, step_m=3) as c:
        res = c.query(small_corpus.prompt, 1, 0, rng=7)  # k'=1 needs 6 counts
        st = c.stats(res.qid)
    assert res.stopped == "server-limit"
    assert res.iterations == 3 and res.S == 2
    assert [s["counts_sent"] for s in st] == [2, 2]


# -- 8. constraints -------------------------------------------------------------------------

C8 = "xi > k rejected; stop rule fires iff 0 <= c-k <= xi"


@criterion(8, C8)
def test_c8_slack_rejected(small_corpus):
    with pytest.raises(ConfigurationError):
        BisectState.initial(FieldParams(), 4, 5)
    with LocalCluster(small_corpus.X, queries=1) as c:
        with pytest.raises(ConfigurationError):
            run_query(c.connect(), small_corpus.prompt, 4, 5)
        assert c.servers[0].bundle.remaining == 1  # rejected before any traffic


@criterion(8, C8)
def test_c8_stop_rule_transcripts():
    fp = FieldParams()
    for k in range(1, 12):
        for xi in range(0, k + 1):
            for c in range(0, 3 * k + 3):
                out = bisect_step(BisectState.initial(fp, k, xi), c)
                assert out.stop == (0 <= c - k <= xi)
                if not out.stop:
                    assert (out.state.d_k > 0) == (c > k)


# -- 9. performance trend --------------------------------------------------------------------

C9 = "server time(k'=128) <= time(k'=16); time(2^16)/time(2^15) in [1.5, 3.0]"


def _server_time(N, kprime, repeats=2):
    data = synth_dataset(N, 16, seed=9, kind="spread")
    times = []
    with LocalCluster(data.X, queries=repeats, seed=9) as c:
        for r in range(repeats):
            res = c.query(data.prompt, kprime // 2, kprime // 2, rng=1000 * r + kprime)
            times.append(sum(s["cpu_seconds"] for s in c.stats(res.qid)) / 2)
    return float(np.mean(times))


@pytest.fixture(scope="module")
def timings():
    return {
        (2**15, 16): _server_time(2**15, 16),
        (2**15, 128): _server_time(2**15, 128),
        (2**16, 16): _server_time(2**16, 16),
    }


@criterion(9, C9)
@pytest.mark.slow
def test_c9_larger_k_is_not_slower(timings, record_property):
    record_property("t16", round(timings[(2**15, 16)], 2))
    record_property("t128", round(timings[(2**15, 128)], 2))
    assert timings[(2**15, 128)] <= timings[(2**15, 16)]


@criterion(9, C9)
@pytest.mark.slow
def test_c9_linear_scaling(timings, record_property):
    ratio = timings[(2**16, 16)] / timings[(2**15, 16)]
    record_property("ratio", round(ratio, 3))
    assert 1.5 <= ratio <= 3.0


# -- 10. leakage ---------------------------------------------------------------------------

C10 = "leakage = S log2(N+1) <= ceil(log2(N/(k+xi))) log2(N+1) on converged runs"


@criterion(10, C10)
@pytest.mark.parametrize("N,k,xi", [(2**10, 8, 8), (2**11, 5, 3), (2**12, 16, 0), (2**12, 32, 32)])
def test_c10_leakage(N, k, xi, record_property):
    data = synth_dataset(N, 16, seed=10, kind="spread")
    with LocalCluster(data.X, queries=1, seed=10) as c:
        res = c.query(data.prompt, k, xi, rng=N + k)
    rep = leakage_report(res)
    record_property("S", res.S)
    record_property("bits", round(rep["physical_bits"], 2))
    assert res.stopped == "rule"
    assert rep["physical_bits"] == pytest.approx(res.S * math.log2(N + 1))
    assert rep["physical_bits"] <= bisection_bound(N, k + xi) * math.log2(N + 1) + 1e-9


@criterion(10, C10)
def test_c10_leakage_gaussian_is_reported(record_property):
    """Gaussian distances need not halve per step, so S may exceed the bound; only the formula is asserted."""
    N, kprime = 2**12, 256
    data = synth_dataset(N, 64, seed=3)
    with LocalCluster(data.X, queries=1, seed=3) as c:
        res = c.query(data.prompt, kprime // 2, kprime // 2, rng=3)
    record_property("S", res.S)
    record_property("bound", bisection_bound(N, kprime))
    assert leakage_report(res)["physical_bits"] == pytest.approx(res.S * math.log2(N + 1))
