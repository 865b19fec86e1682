import numpy as np
import pytest

from fssrag import dot, wide
from fssrag.dealer import dealer_generate
from fssrag.errors import FieldRangeError, ProtocolError
from fssrag.field import FieldParams, vadd, vsigned
from fssrag.ingest import ingest, synth_dataset
from oracles import exact_scaled_dot


def two_party_distances(params, X, u, seed=0):
    """Run the dot-product pipeline for both parties without a network."""
    N, m = X.shape
    db0, db1, _ = ingest(X, params, rng=seed)
    b0, b1 = dealer_generate(params, N, m, 1, seed, N, 8, 0)
    rb = (b0.static_rb(), b1.static_rb())
    e = dot.precompute_doc_masks(dot.doc_mask_contribution(db0.shares, rb[0]), dot.doc_mask_contribution(db1.shares, rb[1]))
    seed_bytes, s1 = dot.share_prompt(params, u, rng=seed + 1)
    prompt = (dot.prompt_share_from_seed(seed_bytes, m), s1)
    corr = (b0.acquire_query().dot, b1.acquire_query().dot)
    d = dot.publish(*(dot.open_prompt_masks(prompt[i], corr[i]) for i in (0, 1)))
    z = [dot.dot_finish(i, d, e, corr[i], rb[i]) for i in (0, 1)]
    u_open = dot.publish(*(dot.trunc_open(params, i, z[i], corr[i]) for i in (0, 1)))
    shares = [dot.trunc_finish(params, i, u_open, corr[i]) for i in (0, 1)]
    return z, vsigned(params, vadd(params, *shares))


def test_distances_match_exact_oracle(big):
    data = synth_dataset(32, 24, seed=3)
    z, dist = two_party_distances(big, data.X, data.prompt)
    zsum = wide.to_signed(wide.add(*z))
    enc = dot.encode_ints(big, data.X).astype(object)
    enc_u = dot.encode_ints(big, data.prompt).astype(object)
    assert list(zsum) == list(enc.dot(enc_u))  # products are exact before truncation
    expect = np.array([exact_scaled_dot(x, data.prompt, 32) for x in data.X])
    diff = dist - expect
    assert np.all((diff == 0) | (diff == 1))
    assert np.all(np.abs(dist / 2**32 - data.X @ data.prompt) <= 25 * 2**-32)


def test_prompt_share_seed_expansion(big):
    u = synth_dataset(1, 16, seed=0).prompt
    seed, s1 = dot.share_prompt(big, u, rng=5)
    assert len(seed) == 16
    s = wide.to_signed(wide.add(dot.prompt_share_from_seed(seed, 16), s1))
    assert list(s) == list(dot.encode_ints(big, u))
    with pytest.raises(ProtocolError):
        dot.prompt_share_from_seed(b"short", 16)


def test_shape_and_range_errors(big):
    with pytest.raises(FieldRangeError):
        dot.encode_wide(big, [np.nan])
    with pytest.raises(FieldRangeError):
        dot.check_ring(FieldParams(2**64 - 59, 34, 64))
    dot.check_ring(big)
    corr = dot.DotCorrelation(0, wide.from_int(np.zeros(4, dtype=np.int64)), None, None, None)
    with pytest.raises(ProtocolError):
        dot.open_prompt_masks(wide.from_int(np.zeros(5, dtype=np.int64)), corr)
    with pytest.raises(ProtocolError):
        dot.doc_mask_contribution(np.zeros((2, 3, 4), np.uint64), np.zeros((2, 2, 4), np.uint64))


def test_trunc_rejects_out_of_range_opening(big):
    corr = dot.DotCorrelation(1, None, None, None, np.zeros(1, dtype=np.uint64))
    u = wide.from_int(np.array([1 << (dot.trunc_bits(big) + dot.KAPPA + 1)], dtype=object))
    with pytest.raises(ProtocolError):
        dot.trunc_finish(big, 1, u, corr)
