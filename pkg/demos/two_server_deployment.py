"""Offline setup, two server daemons over TCP, and the client CLI.

Steps: write an embeddings file, share it into two databases, let the
dealer write two offline bundles, start ``python -m fssrag.server`` twice
from JSON configs, then query with ``python -m fssrag.client``.

Run with ``python3 demos/two_server_deployment.py``.
"""

import json
import shutil
import socket
import subprocess
import sys
import tempfile
from pathlib import Path

from fssrag.dealer import dealer_generate
from fssrag.field import FieldParams
from fssrag.ingest import ingest, synth_dataset, write_embeddings


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


N, m, queries = 1024, 64, 2
params = FieldParams()
work = Path(tempfile.mkdtemp(prefix="fssrag-demo-"))
data = synth_dataset(N, m, seed=3, kind="spread")
emb = write_embeddings(work / "corpus.f64", data.X)
prompt = write_embeddings(work / "prompt.f64", data.prompt[None, :])

db0, db1, meta = ingest(emb, params)
db0.save(work / "db0.p2db")
db1.save(work / "db1.p2db")
dealer_generate(params, N, m, queries, seed=b"demo-dealer", c_m=N, step_m=64, xi=0,
                paths=(work / "bundle0.p2rg", work / "bundle1.p2rg"))
print("offline files:", sorted(p.name for p in work.iterdir()))

peer = f"127.0.0.1:{free_port()}"
endpoints, procs = [], []
for party in (0, 1):
    listen = f"127.0.0.1:{free_port()}"
    cfg = {"party": party, "listen": listen, "peer": peer, "step_m": 64,
           "db_path": str(work / f"db{party}.p2db"), "bundle_path": str(work / f"bundle{party}.p2rg")}
    (work / f"server{party}.json").write_text(json.dumps(cfg, indent=2))
    procs.append(subprocess.Popen([sys.executable, "-m", "fssrag.server", "--config", str(work / f"server{party}.json")],
                                  stdout=subprocess.PIPE, text=True))
    endpoints.append(listen)
try:
    for proc in procs:
        print(proc.stdout.readline().strip())
    cli = [sys.executable, "-m", "fssrag.client", "--servers", ",".join(endpoints), "--prompt", str(prompt),
           "--k", "5", "--xi", "3", "--metrics", str(work / "metrics.txt")]
    out = subprocess.run(cli, capture_output=True, text=True, check=True)
    print("client output (document indices):", out.stdout.strip())
    print((work / "metrics.txt").read_text().strip())
finally:
    for proc in procs:
        proc.terminate()
        proc.wait()
    shutil.rmtree(work)
