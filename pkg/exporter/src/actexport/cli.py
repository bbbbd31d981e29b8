"""Command-line exporter.

The model is a pickled eager nn.Module (torch.save); the dataset is a
torch.save'd dict with an "inputs" tensor and an optional "labels"
tensor. Hook points are repeatable --layer flags of the form
id=module.path:kind where kind is conv or global, listed in forward
execution order.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .export import ExportError, ExportPlan, HookPoint, export


def _parse_hook(spec):
    try:
        layer_id, rest = spec.split("=", 1)
        module, kind = rest.rsplit(":", 1)
    except ValueError:
        raise ExportError(f"bad --layer spec {spec!r}; "
                          "expected id=module.path:kind")
    return HookPoint(layer_id, module, kind)


def build_parser():
    p = argparse.ArgumentParser(
        prog="actexport",
        description="Dump network activations into an activation store.")
    p.add_argument("--model", required=True,
                   help="pickled nn.Module file (torch.save)")
    p.add_argument("--data", required=True,
                   help="torch.save'd dict with 'inputs' and optional 'labels'")
    p.add_argument("--layer", action="append", required=True,
                   metavar="ID=MODULE:KIND",
                   help="hook point, repeatable, in execution order")
    p.add_argument("--out", required=True, help="output store directory")
    p.add_argument("--batch-size", type=int, default=32)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        model = torch.load(args.model, map_location="cpu",
                           weights_only=False)
        data = torch.load(args.data, map_location="cpu", weights_only=True)
        if "inputs" not in data:
            raise ExportError("data file has no 'inputs' tensor")
        plan = ExportPlan(
            model=model,
            inputs=data["inputs"],
            labels=data.get("labels"),
            hooks=[_parse_hook(s) for s in args.layer],
            out_dir=Path(args.out),
            batch_size=args.batch_size,
        )
        out = export(plan)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"export: wrote store with {plan.inputs.shape[0]} examples to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
