"""Self-describing checkpoint container.

Layout of a checkpoint file:

    RLCKPT1 <manifest_nbytes>\n   ascii header line
    <manifest JSON, utf-8>        entry table + model spec + seed + extras
    <raw data blob>               little-endian arrays, back to back

The manifest lists, per entry: name, dtype ("f32"/"f64"), shape, and byte
offset into the data blob.  Everything needed to rebuild the arrays is in
the manifest; the blob is pure numbers.
"""

import json

import numpy as np

from .errors import ContractViolation

MAGIC = "RLCKPT1"

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def save(path, arrays: dict, model_spec: dict, seed: int, extra: dict = None):
    """Write named arrays plus metadata to `path`."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dname = _DTYPE_NAMES.get(arr.dtype)
        if dname is None:
            raise ContractViolation(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = np.ascontiguousarray(arr).astype(_DTYPES[dname]).tobytes()
        entries.append({"name": name, "dtype": dname,
                        "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "model_spec": model_spec,
        "seed": int(seed),
        "extra": extra or {},
        "entries": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(f"{MAGIC} {len(mbytes)}\n".encode("ascii"))
        f.write(mbytes)
        for raw in blobs:
            f.write(raw)


def load(path):
    """Read a checkpoint; returns ({name: array}, manifest dict)."""
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 2 or parts[0] != MAGIC:
            raise ContractViolation(f"{path}: not a {MAGIC} checkpoint")
        mlen = int(parts[1])
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        blob = f.read()
    arrays = {}
    for e in manifest["entries"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return arrays, manifest


def save_params(path, params, extra: dict = None):
    """Checkpoint a ParameterSet (model weights + batch-norm buffers)."""
    arrays = {name: t.data for name, t in params.entries.items()}
    save(path, arrays, params.spec.to_dict(), params.seed, extra=extra)


def load_params(path):
    """Rebuild a ParameterSet from a checkpoint written by save_params."""
    from .models import ModelSpec, build

    arrays, manifest = load(path)
    spec = ModelSpec.from_dict(manifest["model_spec"])
    params = build(spec, seed=manifest["seed"])
    params.load_arrays(arrays)
    return params, manifest
