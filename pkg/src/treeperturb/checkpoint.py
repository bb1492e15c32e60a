"""Single-file checkpoint archives: named arrays plus a JSON manifest."""
import json
import os
import tempfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_MANIFEST_KEY = "__manifest__"


def save_archive(path, arrays: dict, manifest: dict) -> None:
    path = Path(path)
    manifest = dict(manifest, format_version=FORMAT_VERSION)
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload[_MANIFEST_KEY] = np.array(json.dumps(manifest, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz.tmp")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_archive(path):
    with np.load(Path(path), allow_pickle=False) as npz:
        manifest = json.loads(str(npz[_MANIFEST_KEY]))
        arrays = {k: npz[k] for k in npz.files if k != _MANIFEST_KEY}
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
    return arrays, manifest


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)
