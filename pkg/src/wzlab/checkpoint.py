"""Model checkpoints as JSON.

Layout (version 1)::

    {"format": "wzlab-checkpoint", "version": 1, "kind": "wz" | "ntc",
     "meta": {...}, "config_hash": str,
     "layout": [[name, [dims...]], ...],   # order of segments in "values"
     "values": [float, ...]}

Floats are written with Python's shortest round-trip repr, so loading gives
back the exact float64 parameters.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .ad import DenseNetSpec, ParamStore
from .models import MARGINAL, WzModel
from .ntc import NtcModel

FORMAT = "wzlab-checkpoint"
VERSION = 1


def _store_payload(store: ParamStore) -> tuple[list, list]:
    layout = [[name, list(shape)] for name, (_, _, shape) in store.layout.items()]
    return layout, [float(v) for v in store.values]


def _store_from_payload(layout, values) -> ParamStore:
    flat = np.asarray(values, dtype=np.float64)
    arrays, offset = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = flat[offset:offset + n].reshape(shape)
        offset += n
    if offset != flat.size:
        raise ValueError("checkpoint layout does not cover the stored values")
    return ParamStore(arrays)


def save(model, path, config_hash: str = "", extra: dict | None = None) -> Path:
    kind = "ntc" if isinstance(model, NtcModel) else "wz"
    meta = model.meta()
    if kind == "wz":
        meta["decoder_widths"] = list(model.decoder.widths)
        meta["prior_widths"] = list(model.prior_net.widths) if model.prior_net else None
    else:
        meta["analysis_widths"] = list(model.analysis.widths)
        meta["synthesis_widths"] = list(model.synthesis.widths)
        meta["density_filters"] = list(model.density_filters)
    meta.update(extra or {})
    layout, values = _store_payload(model.store)
    doc = {"format": FORMAT, "version": VERSION, "kind": kind, "meta": meta,
           "config_hash": config_hash, "layout": layout, "values": values}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))
    return path


def load(path):
    """Returns (model, meta, config_hash)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT or doc.get("version") != VERSION:
        raise ValueError(f"{path}: not a version-{VERSION} checkpoint")
    meta = doc["meta"]
    store = _store_from_payload(doc["layout"], doc["values"])
    slope = float(meta["negative_slope"])
    if doc["kind"] == "wz":
        dec = DenseNetSpec(tuple(meta["decoder_widths"]), slope)
        prior = None if meta["variant"] == MARGINAL else DenseNetSpec(tuple(meta["prior_widths"]), slope)
        model = WzModel(meta["variant"], int(meta["K"]), float(meta["lambda"]),
                        int(meta["n_samples"]), dec, prior, store)
    elif doc["kind"] == "ntc":
        model = NtcModel(float(meta["lambda"]), DenseNetSpec(tuple(meta["analysis_widths"]), slope),
                         DenseNetSpec(tuple(meta["synthesis_widths"]), slope), store,
                         float(meta["t_hard"]), tuple(meta["density_filters"]))
    else:
        raise ValueError(f"unknown checkpoint kind {doc['kind']!r}")
    return model, meta, doc.get("config_hash", "")
