"""Two-server private top-k retrieval built on function secret sharing."""

from .dcf import dcf_eval, dcf_gen
from .dealer import OfflineBundle, bundle_load, dealer_generate
from .errors import (
    BundleError,
    ConfigurationError,
    FssRagError,
    KeyReuseError,
    ProtocolAbort,
    ProtocolError,
    ShareUsageError,
)
from .field import FieldParams
from .gate import cmp_eval_finish, cmp_eval_mask, cmp_gen
from .ingest import ShareDatabase, ingest, read_embeddings, synth_dataset, write_embeddings
from .shares import Share, reconstruct, share

__version__ = "0.1.0"

# The client and server modules double as ``python -m`` entry points, so they
# are imported on first attribute access rather than with the package.
_LAZY = {
    "BisectState": "client", "RetrievalResult": "client", "bisect_step": "client",
    "leakage_bits": "client", "leakage_report": "client", "run_query": "client",
    "LocalCluster": "harness", "fixed_point_distances": "harness",
    "measure_recall": "harness", "verify_traffic": "harness",
    "Server": "server", "ServerConfig": "server",
}


def __getattr__(name):
    if name in _LAZY:
        import importlib

        return getattr(importlib.import_module(f".{_LAZY[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__all__ = [
    "BisectState", "RetrievalResult", "bisect_step", "leakage_bits", "leakage_report", "run_query",
    "dcf_eval", "dcf_gen", "OfflineBundle", "bundle_load", "dealer_generate",
    "BundleError", "ConfigurationError", "FssRagError", "KeyReuseError", "ProtocolAbort", "ProtocolError",
    "ShareUsageError", "FieldParams", "cmp_eval_finish", "cmp_eval_mask", "cmp_gen",
    "LocalCluster", "fixed_point_distances", "measure_recall", "verify_traffic",
    "ShareDatabase", "ingest", "read_embeddings", "synth_dataset", "write_embeddings",
    "Server", "ServerConfig", "Share", "reconstruct", "share",
]
