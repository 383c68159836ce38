"""Style-aware federated prototype learning simulator.

Array primitives come straight from the C++ core. The experiment helpers
take a spec as text (TOML or JSON) or a path and return decoded JSON.
"""

import json
from pathlib import Path

from ._stylefed import (
    ConfigError,
    DomainError,
    FormatError,
    NumericError,
    ProtocolError,
    ShapeError,
    brier,
    convergence_round,
    cosine_sim,
    decompose,
    gaussian_mixture,
    layer_norm,
    macro_f1,
    proto_logits,
    softmax_scaled,
    wilcoxon_signed_rank,
)
from . import _stylefed

__all__ = [
    "ConfigError", "DomainError", "FormatError", "NumericError", "ProtocolError", "ShapeError",
    "brier", "convergence_round", "cosine_sim", "decompose", "gaussian_mixture", "layer_norm",
    "macro_f1", "proto_logits", "softmax_scaled", "wilcoxon_signed_rank",
    "resolved_config", "run", "compare",
]


def _spec(spec, fmt):
    # A Path, or a str naming an existing file, is read from disk.
    if isinstance(spec, Path) or (isinstance(spec, str) and "\n" not in spec and Path(spec).is_file()):
        path = Path(spec)
        return path.read_text(), fmt or ("json" if path.suffix == ".json" else "toml")
    if isinstance(spec, dict):
        return json.dumps(spec), "json"
    return spec, fmt or "toml"


def resolved_config(spec, fmt=None):
    return json.loads(_stylefed.resolved_config(*_spec(spec, fmt)))


def run(spec, out_dir, fmt=None):
    text, f = _spec(spec, fmt)
    return json.loads(_stylefed.run_experiment(text, f, str(out_dir)))


def compare(spec, methods, out_dir, fmt=None):
    text, f = _spec(spec, fmt)
    return json.loads(_stylefed.compare(text, f, list(methods), str(out_dir)))
