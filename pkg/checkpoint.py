"""
Checkpoints
Directory container: manifest.json (format version, network spec, hypersphere, hyperparameters, provenance)
plus tensors.bin holding named little-endian float32 tensors at the offsets listed in the manifest
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from exceptions import CheckpointError, ConfigError
from models import (
    FusionStrategy,
    Hypersphere,
    NetSpec,
    NetworkParams,
    PretrainedNetworks,
    SvddHyperParams,
    SvddModel,
)
from ndgrad import Tensor

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"
BLOB_DTYPE = np.dtype("<f4")


def _pack(groups: List[Tuple[str, NetworkParams]]) -> Tuple[List[Dict[str, Any]], bytes]:
    entries = []
    chunks = []
    offset = 0
    for group, params in groups:
        for name, weight in params:
            raw = np.ascontiguousarray(weight.data, dtype=BLOB_DTYPE).tobytes()
            entries.append(
                {
                    "name": name,
                    "group": group,
                    "shape": list(weight.data.shape),
                    "offset": offset,
                    "nbytes": len(raw),
                    "sha256": hashlib.sha256(raw).hexdigest(),
                }
            )
            chunks.append(raw)
            offset += len(raw)
    return entries, b"".join(chunks)


def _write(path: str, manifest: Dict[str, Any], blob: bytes) -> str:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, BLOB_NAME), "wb") as f:
        f.write(blob)
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info("Saved %s checkpoint to %s (%d tensors, %d bytes)", manifest["kind"], path, len(manifest["tensors"]), len(blob))
    return path


def _provenance(seed: Optional[int], dataset_fingerprint: str, config_hash: str) -> Dict[str, Any]:
    return {"seed": seed, "dataset_fingerprint": dataset_fingerprint, "config_hash": config_hash}


def save_checkpoint(
    model: SvddModel,
    path: str,
    seed: Optional[int] = None,
    dataset_fingerprint: str = "",
    config_hash: str = "",
) -> str:
    """Trained SVDD model; weights are stored as float32"""
    entries, blob = _pack([("encoder", model.encoder)])
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "svdd",
        "net_spec": model.net_spec.to_dict(),
        "fusion_tag": model.fusion_tag.value,
        "sphere": {"center": [float(v) for v in model.sphere.center], "radius": model.sphere.radius},
        "hp": asdict(model.hp),
        "loss_history": list(model.loss_history),
        "radius_history": list(model.radius_history),
        "tensors": entries,
        **_provenance(seed, dataset_fingerprint, config_hash),
    }
    return _write(path, manifest, blob)


def save_pretrained(
    pretrained: PretrainedNetworks,
    path: str,
    seed: Optional[int] = None,
    dataset_fingerprint: str = "",
    config_hash: str = "",
) -> str:
    """Encoder and decoder(s) after the reconstruction stage"""
    groups = [("encoder", pretrained.encoder)]
    groups += [(f"decoder{i}", decoder) for i, decoder in enumerate(pretrained.decoders)]
    entries, blob = _pack(groups)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "pretrained",
        "net_spec": pretrained.net_spec.to_dict(),
        "fusion_tag": pretrained.strategy.value,
        "n_decoders": len(pretrained.decoders),
        "loss_history": list(pretrained.loss_history),
        "tensors": entries,
        **_provenance(seed, dataset_fingerprint, config_hash),
    }
    return _write(path, manifest, blob)


def read_manifest(path: str) -> Dict[str, Any]:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint manifest {manifest_path} is not valid JSON: {e}") from e
    version = manifest.get("format_version")
    if not isinstance(version, int) or version < 1:
        raise CheckpointError(f"checkpoint manifest {manifest_path} has no valid format_version")
    if version > FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is newer than the supported version {FORMAT_VERSION}; "
            "upgrade this package to read it"
        )
    return manifest


def _unpack(path: str, manifest: Dict[str, Any]) -> Dict[str, NetworkParams]:
    blob_path = os.path.join(path, BLOB_NAME)
    try:
        with open(blob_path, "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise CheckpointError(f"no tensor blob at {blob_path}") from e
    groups: Dict[str, NetworkParams] = {}
    expected_offset = 0
    try:
        entries = [
            (e["group"], e["name"], e["offset"], e["nbytes"], tuple(e["shape"]), e["sha256"]) for e in manifest["tensors"]
        ]
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint manifest has a malformed tensor table: {e!r}") from e
    for group, name, offset, nbytes, shape, digest in entries:
        label = f"{group}/{name}"
        if offset != expected_offset:
            raise CheckpointError(
                f"tensor {label}: manifest offset {offset} disagrees with the blob layout (expected byte {expected_offset})"
            )
        if nbytes != int(np.prod(shape)) * BLOB_DTYPE.itemsize:
            raise CheckpointError(f"tensor {label}: {nbytes} bytes cannot hold shape {list(shape)}")
        if offset + nbytes > len(blob):
            raise CheckpointError(
                f"truncated blob: tensor {label} needs bytes {offset}..{offset + nbytes}, file has {len(blob)}"
            )
        raw = blob[offset : offset + nbytes]
        if hashlib.sha256(raw).hexdigest() != digest:
            raise CheckpointError(f"checksum mismatch in tensor {label} (bytes {offset}..{offset + nbytes})")
        data = np.frombuffer(raw, dtype=BLOB_DTYPE).reshape(shape).astype(np.float32)
        groups.setdefault(group, NetworkParams()).add(name, Tensor(data, requires_grad=True, name=name))
        expected_offset = offset + nbytes
    if expected_offset != len(blob):
        raise CheckpointError(f"blob has {len(blob) - expected_offset} unexpected trailing bytes after byte {expected_offset}")
    return groups


def _net_spec(manifest: Dict[str, Any]) -> NetSpec:
    try:
        return NetSpec(**manifest["net_spec"]).validate()
    except (KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"checkpoint holds an invalid network spec: {e}") from e


def load_checkpoint(path: str) -> SvddModel:
    manifest = read_manifest(path)
    if manifest.get("kind") != "svdd":
        raise CheckpointError(f"{path} holds a {manifest.get('kind')!r} checkpoint, not a trained SVDD model")
    groups = _unpack(path, manifest)
    net_spec = _net_spec(manifest)
    try:
        sphere = Hypersphere(np.asarray(manifest["sphere"]["center"]), manifest["sphere"]["radius"])
        model = SvddModel(
            encoder=groups["encoder"],
            sphere=sphere,
            hp=SvddHyperParams(**manifest["hp"]),
            fusion_tag=FusionStrategy(manifest["fusion_tag"]),
            net_spec=net_spec,
            loss_history=list(manifest["loss_history"]),
            radius_history=list(manifest["radius_history"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: cannot rebuild the SVDD model from its manifest: {e!r}") from e
    logger.info("Loaded %s fusion model from %s", model.fusion_tag.value, path)
    return model


def load_pretrained(path: str) -> PretrainedNetworks:
    manifest = read_manifest(path)
    if manifest.get("kind") != "pretrained":
        raise CheckpointError(f"{path} holds a {manifest.get('kind')!r} checkpoint, not pretrained networks")
    groups = _unpack(path, manifest)
    net_spec = _net_spec(manifest)
    try:
        return PretrainedNetworks(
            encoder=groups["encoder"],
            decoders=[groups[f"decoder{i}"] for i in range(manifest["n_decoders"])],
            net_spec=net_spec,
            strategy=FusionStrategy(manifest["fusion_tag"]),
            loss_history=list(manifest["loss_history"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: cannot rebuild the pretrained networks from their manifest: {e!r}") from e
