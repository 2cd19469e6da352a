"""Parameter files: a JSON manifest plus one little-endian float32 blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST_VERSION = 1


def save_parameters(state: dict[str, np.ndarray], manifest_path: str | Path, blob_path: str | Path) -> None:
    """Write ``state`` in insertion order. Values are down-cast to float32."""
    manifest_path, blob_path = Path(manifest_path), Path(blob_path)
    entries = []
    offset = 0
    chunks = []
    for name, arr in state.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    doc = {"version": MANIFEST_VERSION, "blob": blob_path.name, "byte_order": "little", "tensors": entries}
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    blob_path.write_bytes(b"".join(chunks))


def load_parameters(manifest_path: str | Path, blob_path: str | Path | None = None) -> dict[str, np.ndarray]:
    """Read a parameter manifest; values are up-cast to float64."""
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    if blob_path is None:
        blob_path = manifest_path.parent / doc["blob"]
    blob = Path(blob_path).read_bytes()
    state: dict[str, np.ndarray] = {}
    for entry in doc["tensors"]:
        if entry["dtype"] != "float32":
            raise ValueError(f"tensor {entry['name']}: unsupported dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise ValueError(f"tensor {entry['name']}: blob truncated at byte {len(blob)}, need {end}")
        state[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f4").astype(np.float64).reshape(shape)
    return state
