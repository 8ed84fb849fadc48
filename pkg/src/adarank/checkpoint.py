"""JSON checkpoints of adapter parameters.

Layout (``format_version`` 1)::

    {
      "format": "adarank-checkpoint",
      "format_version": 1,
      "adapters": [
        {"matrix_id": 0, "layer": 0, "kind": "Wq", "type": "svd",
         "d1": 32, "d2": 32, "rank": 4, "alpha": 16.0,
         "p": [...], "lambda": [...], "q": [...], "mask": [true, ...]},
        ...
      ]
    }

Arrays are flattened row-major; floats are written with round-trip precision.
LoRA adapters carry ``"type": "lora"`` and fields ``a`` / ``b`` instead of
``p`` / ``lambda`` / ``q``.
"""
from __future__ import annotations

import json

import numpy as np

from .adapters import LoraAdapter, SvdAdapter
from .errors import InputError

FORMAT = "adarank-checkpoint"
FORMAT_VERSION = 1


def _flat(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=np.float64).reshape(-1)]


def adapter_record(a) -> dict:
    d1, d2 = a.shape
    rec = {"matrix_id": int(a.matrix_id), "layer": int(a.layer), "kind": a.kind,
           "type": "svd" if isinstance(a, SvdAdapter) else "lora",
           "d1": int(d1), "d2": int(d2), "rank": int(a.rank), "alpha": float(a.alpha)}
    if isinstance(a, SvdAdapter):
        rec.update(p=_flat(a.p), **{"lambda": _flat(a.lam)}, q=_flat(a.q))
    else:
        rec.update(a=_flat(a.a), b=_flat(a.b))
    rec["mask"] = [bool(m) for m in a.mask]
    return rec


def checkpoint_dict(model) -> dict:
    return {"format": FORMAT, "format_version": FORMAT_VERSION,
            "adapters": [adapter_record(a) for a in model.adapters]}


def dumps(ckpt: dict) -> str:
    return json.dumps(ckpt, indent=1, sort_keys=True) + "\n"


def save(model_or_dict, path) -> None:
    ckpt = model_or_dict if isinstance(model_or_dict, dict) else checkpoint_dict(model_or_dict)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(ckpt))


def load(path) -> list:
    """Read a checkpoint file back into adapter objects."""
    with open(path, encoding="utf-8") as fh:
        ckpt = json.load(fh)
    if ckpt.get("format") != FORMAT or ckpt.get("format_version") != FORMAT_VERSION:
        raise InputError(f"{path}: not an {FORMAT} v{FORMAT_VERSION} file")
    out = []
    for rec in ckpt["adapters"]:
        d1, d2, r = rec["d1"], rec["d2"], rec["rank"]
        common = dict(alpha=rec["alpha"], mask=np.array(rec["mask"], dtype=bool),
                      matrix_id=rec["matrix_id"], kind=rec["kind"], layer=rec["layer"])
        if rec["type"] == "svd":
            out.append(SvdAdapter(p=np.reshape(rec["p"], (d1, r)), lam=np.array(rec["lambda"]),
                                  q=np.reshape(rec["q"], (r, d2)), **common))
        else:
            out.append(LoraAdapter(a=np.reshape(rec["a"], (r, d2)), b=np.reshape(rec["b"], (d1, r)), **common))
    return out
