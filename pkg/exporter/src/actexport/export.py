"""Run a trained network over a dataset and dump an activation store.

Hook points name submodules of the model; the forward output of each
hooked module becomes one store layer (conv outputs are transposed from
NCHW to NHWC). Predictions come from the same forward pass. Geometry
stage chains are read off the conv/pool modules executed between
consecutive hook points.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .store_format import write_blob_file, write_manifest


class ExportError(RuntimeError):
    pass


@dataclass(frozen=True)
class HookPoint:
    layer_id: str
    module: str   # dotted submodule path within the model
    kind: str     # "conv" | "global"

    def __post_init__(self):
        if self.kind not in ("conv", "global"):
            raise ExportError(f"hook {self.layer_id}: unknown kind {self.kind!r}")


@dataclass
class ExportPlan:
    model: nn.Module
    inputs: torch.Tensor          # (N, ...) dataset split
    labels: torch.Tensor | None   # (N,) int labels or None
    hooks: list                   # HookPoint, in forward execution order
    out_dir: Path
    batch_size: int = 32

    def __post_init__(self):
        if not self.hooks:
            raise ExportError("plan needs at least one hook point")
        ids = [h.layer_id for h in self.hooks]
        mods = [h.module for h in self.hooks]
        if len(set(ids)) != len(ids) or len(set(mods)) != len(mods):
            raise ExportError("hook points must resolve to unique layers")
        out = Path(self.out_dir)
        if out.exists() and any(out.iterdir()):
            raise ExportError(f"output directory {out} is not empty")


def _resolve(model, path):
    # walk named_modules (works for eager and scripted modules alike)
    for name, module in model.named_modules():
        if name == path:
            return module
    raise ExportError(f"cannot resolve hook module {path!r}")


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


_TRANSPARENT = {"ReLU", "BatchNorm2d", "Identity", "Dropout", "Sigmoid",
                "Tanh", "LeakyReLU"}


def _type_name(module):
    # scripted modules report the original class through original_name
    return getattr(module, "original_name", type(module).__name__)


def _stage_of(module):
    """Geometry stage of one module, or None if geometry-transparent."""
    name = _type_name(module)
    if name == "Conv2d":
        if any(d != 1 for d in _pair(module.dilation)):
            raise ExportError("dilated convolutions are not supported")
        return {"kernel": list(_pair(module.kernel_size)),
                "stride": list(_pair(module.stride)),
                "padding": list(_pair(module.padding))}
    if name in ("MaxPool2d", "AvgPool2d"):
        return {"kernel": list(_pair(module.kernel_size)),
                "stride": list(_pair(module.stride or module.kernel_size)),
                "padding": list(_pair(module.padding))}
    if name in _TRANSPARENT:
        return None
    return "opaque"


def geometry_stages(model, plan):
    """Stage chains between consecutive hook points.

    Walks the model's leaf modules in registration order (the execution
    order for sequential-style models). For a conv upper layer the chain
    is the conv/pool stages strictly after the lower hook up to and
    including the upper hook; global upper layers see the whole lower
    grid and declare an empty chain.
    """
    leaves = [(name, m) for name, m in model.named_modules()
              if not any(m.children())]
    index = {name: i for i, (name, _) in enumerate(leaves)}
    for h in plan.hooks:
        if h.module not in index:
            raise ExportError(f"hook module {h.module!r} is not a leaf module")
    pairs = []
    for lower, upper in zip(plan.hooks, plan.hooks[1:]):
        if index[upper.module] <= index[lower.module]:
            raise ExportError("hook points must be listed in execution order")
        if upper.kind == "global":
            pairs.append({"upper": upper.layer_id, "lower": lower.layer_id,
                          "stages": []})
            continue
        stages = []
        for name, m in leaves[index[lower.module] + 1:index[upper.module] + 1]:
            stage = _stage_of(m)
            if stage == "opaque":
                raise ExportError(
                    f"module {name!r} between conv hooks has unknown geometry")
            if stage is not None:
                stages.append(stage)
        pairs.append({"upper": upper.layer_id, "lower": lower.layer_id,
                      "stages": stages})
    return {"pairs": pairs}


def export(plan: ExportPlan):
    """Write the activation store described by the plan; returns its path."""
    model = plan.model
    model.eval()
    hooks = {h.layer_id: _resolve(model, h.module) for h in plan.hooks}
    geometry = geometry_stages(model, plan)

    captured = {}
    handles = []
    for layer_id, module in hooks.items():
        def grab(_mod, _inp, out, layer_id=layer_id):
            captured[layer_id] = out.detach()
        handles.append(module.register_forward_hook(grab))

    n = plan.inputs.shape[0]
    per_layer = {h.layer_id: [] for h in plan.hooks}
    shapes = {}
    preds = []
    num_classes = None
    try:
        with torch.no_grad():
            for lo in range(0, n, plan.batch_size):
                batch = plan.inputs[lo:lo + plan.batch_size]
                captured.clear()
                logits = model(batch)
                if logits.dim() != 2:
                    raise ExportError("model output must be (N, num_classes)")
                num_classes = int(logits.shape[1])
                preds.append(torch.argmax(logits, dim=1))
                for h in plan.hooks:
                    if h.layer_id not in captured:
                        raise ExportError(
                            f"hook {h.layer_id} captured no output")
                    out = captured[h.layer_id]
                    if h.kind == "conv":
                        if out.dim() != 4:
                            raise ExportError(
                                f"conv hook {h.layer_id} got rank-{out.dim()} "
                                "output")
                        out = out.permute(0, 2, 3, 1)  # NCHW -> NHWC
                    elif out.dim() != 2:
                        raise ExportError(
                            f"global hook {h.layer_id} got rank-{out.dim()} "
                            "output")
                    shape = tuple(out.shape[1:])
                    if shapes.setdefault(h.layer_id, shape) != shape:
                        raise ExportError(
                            f"layer {h.layer_id}: shape drift across batches "
                            f"({shapes[h.layer_id]} vs {shape})")
                    per_layer[h.layer_id].append(
                        out.cpu().numpy().astype(np.float32))
    finally:
        for handle in handles:
            handle.remove()

    out_dir = Path(plan.out_dir)
    records = []
    for h in plan.hooks:
        arr = np.concatenate(per_layer[h.layer_id], axis=0)
        records.append({"id": h.layer_id, "kind": h.kind,
                        "shape": list(arr.shape[1:])})
        write_blob_file(arr, out_dir / "layers" / f"{h.layer_id}.actd")
    predictions = torch.cat(preds).cpu().numpy().astype(np.int64)
    write_blob_file(predictions, out_dir / "predictions.actd")
    has_labels = plan.labels is not None
    if has_labels:
        labels = np.asarray(plan.labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ExportError(f"labels shape {labels.shape} != ({n},)")
        write_blob_file(labels, out_dir / "labels.actd")
    write_manifest(out_dir, n, num_classes, records,
                   has_labels=has_labels, has_predictions=True,
                   geometry=geometry)
    return out_dir
