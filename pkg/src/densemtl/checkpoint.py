"""Checkpoint archive: named parameter arrays + model config in one zip.

Layout::

    checkpoint.zip
      manifest.json          format tag, model config, user extras, array index
      arrays/<name>.npy      one .npy per state-dict entry (params and buffers)

Arrays are stored with their state-dict names so a checkpoint can be inspected
with nothing but ``zipfile`` and ``numpy``.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from .model import ModelConfig, MultiTaskNet, build_model

FORMAT = "densemtl-checkpoint"
VERSION = 1


def save_checkpoint(
    path: str | Path,
    model: MultiTaskNet,
    extra: Optional[dict] = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": model.config.to_dict(),
        "extra": extra or {},
        "arrays": {
            name: {"shape": list(t.shape), "dtype": str(t.detach().cpu().numpy().dtype)}
            for name, t in state.items()
        },
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, t in state.items():
            buf = io.BytesIO()
            np.save(buf, t.detach().cpu().numpy())
            zf.writestr(f"arrays/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> Tuple[MultiTaskNet, dict]:
    """Rebuild the model from a checkpoint; returns (model, extra)."""
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT:
            raise ValueError(f"{path} is not a {FORMAT} archive")
        if manifest.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        config = ModelConfig.from_dict(manifest["model_config"])
        model = build_model(config)
        state: Dict[str, torch.Tensor] = {}
        for name in manifest["arrays"]:
            arr = np.load(io.BytesIO(zf.read(f"arrays/{name}.npy")))
            state[name] = torch.from_numpy(arr)
        model.load_state_dict(state, strict=True)
    model.eval()
    return model, manifest.get("extra", {})
