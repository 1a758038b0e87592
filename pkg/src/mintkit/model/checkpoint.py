"""Checkpoint container: a zip of ``.npy`` tensors plus a JSON header.

Entries are written in sorted order with a fixed timestamp, so saving the same
model twice yields byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Any, Optional

import numpy as np

from ..tensor import Tensor
from .config import MiniModelConfig
from .ids import MaskSet, SublayerId
from .network import MiniModel, SublayerArch

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(
    path,
    model: MiniModel,
    masks: Optional[MaskSet] = None,
    extra: Optional[dict[str, Any]] = None,
    mask_arrays: Optional[dict[str, np.ndarray]] = None,
) -> Path:
    """Write ``model`` (config, seed, arch, parameters) and optional masks / metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "arch": {str(s): {"present": a.present, "heads": list(a.heads)} for s, a in sorted(model.arch.items())},
        "masks": (masks or MaskSet.identity()).to_dict(),
        "params": sorted(model.params),
        "weight_masks": sorted(mask_arrays or {}),
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _entry(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(model.params):
            buf = io.BytesIO()
            np.save(buf, model.params[name].data, allow_pickle=False)
            _entry(zf, f"params/{name}.npy", buf.getvalue())
        for name in sorted(mask_arrays or {}):
            buf = io.BytesIO()
            np.save(buf, np.asarray(mask_arrays[name]), allow_pickle=False)
            _entry(zf, f"weight_masks/{name}.npy", buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[MiniModel, MaskSet, dict[str, Any], dict[str, np.ndarray]]:
    """Inverse of :func:`save_checkpoint`: ``(model, masks, extra, weight_masks)``."""
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from None
    with zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')!r}")
        config = MiniModelConfig.from_dict(meta["config"])
        params = {}
        for name in meta["params"]:
            data = np.load(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False)
            params[name] = Tensor(data, requires_grad=True, name=name)
        wmasks = {n: np.load(io.BytesIO(zf.read(f"weight_masks/{n}.npy")), allow_pickle=False) for n in meta["weight_masks"]}
    arch = {SublayerId.parse(k): SublayerArch(v["present"], tuple(v["heads"])) for k, v in meta["arch"].items()}
    model = MiniModel(config, params, arch, int(meta["seed"]))
    return model, MaskSet.from_dict(meta["masks"]), meta["extra"], wmasks
