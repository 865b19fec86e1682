import numpy as np
import pytest

from fssrag.errors import ConfigurationError
from fssrag.harness import (
    LocalCluster,
    bisection_bound,
    count_at_least,
    fixed_point_distances,
    float_topk,
    measure_recall,
    verify_traffic,
)
from fssrag.ingest import synth_dataset
from oracles import exact_scaled_dot


def test_fixed_point_oracle_agrees_with_reference(big):
    d = synth_dataset(20, 7, seed=1)
    got = fixed_point_distances(big, d.X, d.prompt)
    assert list(got) == [exact_scaled_dot(x, d.prompt, 32) for x in d.X]
    assert count_at_least(got, 0) == int(np.sum(got >= 0))


def test_recall_measure():
    X = np.eye(4)
    u = np.array([0.9, 0.1, 0.3, 0.0])
    u /= np.linalg.norm(u)
    assert list(float_topk(X, u, 2)) == [0, 2]
    assert measure_recall([0, 2], X, u) == 1.0
    assert measure_recall([1, 3], X, u) == 0.0
    assert measure_recall([0, 1], X, u) == 0.5
    assert measure_recall([], X, u) == 1.0
    tie = np.array([[1.0, 0], [1.0, 0], [0, 1.0]])
    assert list(float_topk(tie, np.array([1.0, 0]), 1)) == [0]


def test_bisection_bound():
    assert bisection_bound(2**17, 16) == 13
    assert bisection_bound(2**17, 128) == 10
    assert bisection_bound(2**20, 16) == 16
    assert bisection_bound(8, 16) == 0


def test_traffic_terms_and_exact_delivery(tmp_path):
    d = synth_dataset(512, 96, seed=2, kind="spread")
    with LocalCluster(d.X, queries=1, retain_distances=True) as c:
        res = c.query(d.prompt, 8, 8, rng=4)
        terms = {t.name: t for t in verify_traffic(res, c.stats(res.qid), c.params, 96)}
        dist = c.distances(res.qid)
    assert all(t.ok for t in terms.values()), terms
    assert terms["prompt_upload"].predicted == 16 * 96
    assert terms["candidate_return"].predicted == 16 * 512
    assert terms["intra_server_per_iteration"].predicted == 16 * 512
    assert terms["rtt"].measured == res.S + 1
    assert "4224" in terms["key_bytes_per_iteration"].note
    assert np.array_equal(np.sort(res.indices), np.flatnonzero(dist >= res.threshold))


def test_cluster_modes_validated():
    d = synth_dataset(8, 4, seed=0)
    with pytest.raises(ConfigurationError):
        LocalCluster(d.X, mode="carrier-pigeon")
