"""Versioned checkpoint container.

A checkpoint is a zip archive of ``.npy`` members (readable with
``numpy.load``) plus a ``meta.json`` member holding the graph specs and
any caller metadata.  Member timestamps are pinned so that identical
contents give byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .adam import AdamState
from .graph import ModelGraph
from .spec import GraphSpec

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_bundle(
    path,
    graphs: dict[str, ModelGraph],
    adams: dict[str, AdamState] | None = None,
    meta: dict | None = None,
) -> None:
    adams = adams or {}
    header = {
        "format_version": FORMAT_VERSION,
        "graphs": {name: g.spec.to_dict() for name, g in graphs.items()},
        "frozen": {name: [layer.frozen for layer in g.layers] for name, g in graphs.items()},
        "adam": {
            name: {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step}
            for name, a in adams.items()
        },
        "meta": meta or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _member(zf, "meta.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for name, g in graphs.items():
            for key, arr in sorted(g.state_dict().items()):
                _member(zf, f"{name}/{key}.npy", _npy_bytes(arr))
        for name, a in adams.items():
            for key in sorted(a.m):
                _member(zf, f"adam/{name}/m/{key}.npy", _npy_bytes(a.m[key]))
                _member(zf, f"adam/{name}/v/{key}.npy", _npy_bytes(a.v[key]))


def load_bundle(path) -> tuple[dict[str, ModelGraph], dict[str, AdamState], dict]:
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile:
        raise CheckpointError(f"{path}: not a checkpoint archive") from None
    with zf:
        try:
            header = json.loads(zf.read("meta.json"))
        except KeyError:
            raise CheckpointError(f"{path}: not a checkpoint (no meta.json)") from None
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)))
    graphs = {}
    for name, spec_dict in header["graphs"].items():
        g = ModelGraph(GraphSpec.from_dict(spec_dict), seed=None)
        prefix = f"{name}/"
        g.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        for layer, frozen in zip(g.layers, header["frozen"][name]):
            layer.frozen = frozen
        graphs[name] = g
    adams = {}
    for name, hp in header["adam"].items():
        a = AdamState(**hp)
        for k, v in arrays.items():
            parts = k.split("/", 3)
            if parts[0] == "adam" and parts[1] == name:
                (a.m if parts[2] == "m" else a.v)[parts[3]] = v
        adams[name] = a
    return graphs, adams, header["meta"]
