"""Checkpoints: ``<stem>.json`` manifest plus ``<stem>.bin`` f32le blob."""

from __future__ import annotations

import json

import numpy as np

from .multi_exit import EAdapterBank, ExitPlan, METModel
from .vit import BackboneWeights, ViTConfig, backbone_shapes, zero_head

FORMAT = "met-checkpoint"
DTYPE_TAG = "f32le"


class CheckpointError(ValueError):
    pass


def save_checkpoint(tensors: dict[str, np.ndarray], stem: str, meta: dict | None = None) -> dict:
    records, offset, blobs = [], 0, []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        records.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        blobs.append(arr.tobytes())
    if len({r["name"] for r in records}) != len(records):
        raise CheckpointError("duplicate tensor names")
    manifest = {"format": FORMAT, "dtype": DTYPE_TAG, "tensors": records, "meta": meta or {}}
    with open(stem + ".bin", "wb") as f:
        for b in blobs:
            f.write(b)
    with open(stem + ".json", "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def validate_manifest(manifest: dict, blob_len: int) -> None:
    if manifest.get("dtype") != DTYPE_TAG:
        raise CheckpointError(f"unsupported dtype tag {manifest.get('dtype')!r}")
    expected, seen = 0, set()
    for rec in manifest.get("tensors", []):
        name, shape, off = rec.get("name"), rec.get("shape"), rec.get("offset")
        if not isinstance(name, str) or name in seen:
            raise CheckpointError(f"bad or duplicate tensor name {name!r}")
        seen.add(name)
        if not isinstance(shape, list) or any(not isinstance(s, int) or s <= 0 for s in shape):
            raise CheckpointError(f"{name}: invalid shape {shape}")
        if off != expected:
            raise CheckpointError(
                f"{name}: offset {off} breaks contiguous layout (expected {expected})")
        expected += 4 * int(np.prod(shape, dtype=np.int64))
    if blob_len != expected:
        raise CheckpointError(f"blob length {blob_len} bytes, manifest expects {expected}")


def load_checkpoint(stem: str,
                    expected_shapes: dict[str, tuple[int, ...]] | None = None
                    ) -> tuple[dict[str, np.ndarray], dict]:
    with open(stem + ".json") as f:
        manifest = json.load(f)
    with open(stem + ".bin", "rb") as f:
        blob = f.read()
    validate_manifest(manifest, len(blob))
    out = {}
    for rec in manifest["tensors"]:
        count = int(np.prod(rec["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=rec["offset"])
        out[rec["name"]] = arr.reshape(rec["shape"]).copy()
    if expected_shapes is not None:
        unknown = sorted(set(out) - set(expected_shapes))
        if unknown:
            raise CheckpointError(f"unknown tensor names: {unknown}")
        missing = sorted(set(expected_shapes) - set(out))
        if missing:
            raise CheckpointError(f"missing tensors: {missing}")
        for name, shape in expected_shapes.items():
            if tuple(out[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"{name}: shape {tuple(out[name].shape)} != expected {tuple(shape)}")
    return out, manifest.get("meta", {})


def model_meta(model: METModel) -> dict:
    return {
        "vit": model.config.to_dict(),
        "placement": list(model.plan.placement),
        "dprime": model.bank.dprime,
        "merge_mode": model.merge_mode,
        "share_token": model.share_token,
        "mask_cross_exit": model.mask_cross_exit,
    }


def save_model(model: METModel, stem: str, extra_meta: dict | None = None) -> dict:
    tensors = {p.name: p.data for p in model.parameters()}
    meta = model_meta(model)
    meta.update(extra_meta or {})
    return save_checkpoint(tensors, stem, meta)


def save_backbone(backbone: BackboneWeights, cfg: ViTConfig, stem: str) -> dict:
    return save_checkpoint(backbone.state_dict(), stem, {"vit": cfg.to_dict()})


def load_backbone(stem: str) -> tuple[BackboneWeights, ViTConfig]:
    state, meta = load_checkpoint(stem)
    cfg = ViTConfig.from_dict(meta["vit"])
    shapes = backbone_shapes(cfg)
    unknown = sorted(set(state) - set(shapes))
    if unknown:
        raise CheckpointError(f"unknown tensor names: {unknown}")
    return BackboneWeights.from_state(cfg, state), cfg


def load_model(stem: str) -> tuple[METModel, dict]:
    state, meta = load_checkpoint(stem)
    cfg = ViTConfig.from_dict(meta["vit"])
    plan = ExitPlan(tuple(meta["placement"]), cfg.layers)
    backbone = BackboneWeights.from_state(
        cfg, {k: v for k, v in state.items() if k.startswith("backbone.")})
    bank = EAdapterBank.init(cfg.dim, int(meta["dprime"]), plan, np.random.default_rng(0),
                             shared=bool(meta["share_token"]))
    heads = [zero_head(f"head.{e}", cfg.dim, cfg.num_classes)
             for e in range(1, plan.num_exits + 1)]
    model = METModel(cfg, backbone, bank, heads, plan, meta["merge_mode"],
                     bool(meta["share_token"]), bool(meta["mask_cross_exit"]))
    params = {p.name: p for p in model.parameters()}
    unknown = sorted(set(state) - set(params))
    if unknown:
        raise CheckpointError(f"unknown tensor names: {unknown}")
    missing = sorted(set(params) - set(state))
    if missing:
        raise CheckpointError(f"missing tensors: {missing}")
    for name, p in params.items():
        if tuple(state[name].shape) != p.shape:
            raise CheckpointError(f"{name}: shape {state[name].shape} != expected {p.shape}")
        p.tensor.data = state[name].astype(np.float64)
    return model, meta
