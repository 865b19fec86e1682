"""A private top-k query against two in-process servers.

The user secret-shares a prompt embedding, then bisects on a distance
threshold.  Each round the servers return only shares of a count.  At the
end they return shares of a 0/1 vector marking the selected documents.

Run with ``python3 demos/private_topk.py``.
"""

import numpy as np

from fssrag.client import leakage_report
from fssrag.harness import LocalCluster, float_topk, measure_recall, verify_traffic
from fssrag.ingest import synth_dataset

N, m, k, xi = 4096, 128, 8, 8
data = synth_dataset(N, m, seed=1)
print(f"{N} documents of dimension {m}; asking for between {k} and {k + xi} nearest")

# Ingestion shares the corpus; the dealer writes per-query correlated randomness.
with LocalCluster(data.X, queries=1, seed=1) as cluster:
    res = cluster.query(data.prompt, k, xi, rng=1)
    stats = cluster.stats(res.qid)
    terms = verify_traffic(res, stats, cluster.params, m)

print("count per round:", res.history)
print(f"stopped by {res.stopped} after S={res.S} counts, {res.rounds} round trips")
print("retrieved:", sorted(res.indices.tolist()))
print("plaintext:", sorted(float_topk(data.X, data.prompt, res.c).tolist()))
print("recall:", measure_recall(res.indices, data.X, data.prompt))

rep = leakage_report(res)
print(f"leakage: {rep['physical_bits']:.1f} bits of counts, {rep['functional_documents']} documents revealed")

print("\ntraffic (measured vs closed form)")
for t in terms:
    print(f"  {t.name:<28} {t.measured:>12.0f} {t.predicted:>12.0f}  {'ok' if t.ok else 'off'} {t.note}")
print("server cpu seconds:", [round(s["cpu_seconds"], 2) for s in stats])
