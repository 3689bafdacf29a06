"""Checkpoint container: one JSON manifest line, then named float32 little-endian blobs.

Manifest keys: ``magic`` ("SMK1"), ``kind`` ("model" | "lora" | "autoencoder"),
``blobs`` (list of ``{"name", "shape"}`` in payload order) plus free-form
metadata (arch, vocab, schedule fingerprint, seed, ...).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from satmaker.errors import FormatError, TruncationError

MAGIC = "SMK1"
_F32 = np.dtype("<f4")


def save_checkpoint(path, tensors: dict, manifest: dict) -> None:
    names = list(tensors)
    arrays = [np.asarray(torch.as_tensor(tensors[n]).detach().cpu().numpy(), dtype=_F32) for n in names]
    head = dict(manifest)
    head["magic"] = MAGIC
    head.setdefault("kind", "model")
    head["blobs"] = [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)]
    with open(path, "wb") as fh:
        fh.write((json.dumps(head, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8"))
        for a in arrays:
            fh.write(a.tobytes(order="C"))


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("checkpoint manifest line is not terminated")
    try:
        head = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint manifest is not valid JSON: {exc}") from None
    if head.get("magic") != MAGIC:
        raise FormatError(f"checkpoint field 'magic' is {head.get('magic')!r}, expected {MAGIC!r}")
    blobs = head.get("blobs")
    if not isinstance(blobs, list):
        raise FormatError("checkpoint field 'blobs' missing")
    payload = memoryview(raw)[nl + 1:]
    tensors = {}
    offset = 0
    for b in blobs:
        count = int(np.prod(b["shape"])) if b["shape"] else 1
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise TruncationError(f"blob {b['name']!r} runs past the end of the file")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype=_F32).reshape(b["shape"]).copy()
        tensors[b["name"]] = torch.from_numpy(arr)
        offset += nbytes
    if offset != len(payload):
        raise TruncationError(f"{len(payload) - offset} trailing bytes after the last blob")
    return head, tensors


def save_model(model, path, sched=None, seed: int = 0, extra: dict | None = None,
               extra_tensors: dict | None = None) -> None:
    from dataclasses import asdict

    state = {k: v for k, v in model.state_dict().items() if ".adapter." not in k}
    manifest = {
        "kind": "model",
        "arch": {**asdict(model.arch), "widths": list(model.arch.widths)},
        "vocab": list(model.vocab),
        "seed": int(seed),
    }
    if sched is not None:
        manifest["schedule"] = sched.describe()
        manifest["schedule_hash"] = sched.fingerprint()
    manifest.update(extra or {})
    tensors = dict(state)
    tensors.update(extra_tensors or {})
    save_checkpoint(path, tensors, manifest)


def load_model(path):
    """Returns ``(model, manifest, extra_tensors)``; extra tensors are blobs not in the state dict."""
    from satmaker.denoiser import Arch, Denoiser

    head, tensors = load_checkpoint(path)
    if head.get("kind") != "model":
        raise FormatError(f"checkpoint kind is {head.get('kind')!r}, expected 'model'")
    model = Denoiser(Arch.from_dict(head["arch"]), head["vocab"])
    keys = set(model.state_dict())
    missing = keys - set(tensors)
    if missing:
        raise FormatError(f"checkpoint lacks weights {sorted(missing)[:5]}")
    model.load_state_dict({k: tensors[k] for k in keys})
    extra = {k: v for k, v in tensors.items() if k not in keys}
    return model, head, extra


def save_adapters(adapters: dict, path, base_hash: str | None = None) -> None:
    tensors = {}
    for target, a in adapters.items():
        tensors[f"{target}::A"] = a.A
        tensors[f"{target}::B"] = a.B
    first = next(iter(adapters.values()))
    manifest = {
        "kind": "lora",
        "rank": first.rank,
        "scale": first.scale,
        "targets": list(adapters),
        "base_hash": base_hash,
    }
    save_checkpoint(path, tensors, manifest)


def load_adapters(path, model) -> dict:
    from satmaker.lora import LoRAAdapter, _owner

    head, tensors = load_checkpoint(path)
    if head.get("kind") != "lora":
        raise FormatError(f"checkpoint kind is {head.get('kind')!r}, expected 'lora'")
    adapters = {}
    for t in head["targets"]:
        owner = _owner(model, t)
        a = LoRAAdapter(t, tensors[f"{t}::A"], tensors[f"{t}::B"], head.get("scale", 1.0))
        owner.adapter = a
        adapters[t] = a
    return adapters


def weights_hash(model) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        if ".adapter." in k:
            continue
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def save_autoencoder(params, path) -> None:
    m = params.model
    save_checkpoint(path, dict(m.state_dict()), {
        "kind": "autoencoder",
        "width": m.width,
        "bottleneck": m.bottleneck,
        "seed": int(params.seed),
        "losses": [float(x) for x in params.losses],
    })


def load_autoencoder(path):
    from satmaker.baselines import Autoencoder, AutoencoderParams

    head, tensors = load_checkpoint(path)
    if head.get("kind") != "autoencoder":
        raise FormatError(f"checkpoint kind is {head.get('kind')!r}, expected 'autoencoder'")
    model = Autoencoder(head["width"], head["bottleneck"])
    model.load_state_dict(tensors)
    model.eval()
    return AutoencoderParams(model, head.get("seed", 0), head.get("losses", []))
