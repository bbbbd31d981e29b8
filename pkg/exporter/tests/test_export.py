from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

from actatlas.geometry import StageSpec, compose, window
from actatlas.tensor_store import open_store
from actexport import ExportError, ExportPlan, HookPoint, export
from actexport.cli import main as cli_main
from actexport.export import geometry_stages


def toy_cnn(seed=0):
    torch.manual_seed(seed)
    return nn.Sequential(
        nn.Conv2d(1, 4, 3, padding=1),   # 0
        nn.ReLU(),                       # 1
        nn.Conv2d(4, 8, 3, padding=1),   # 2
        nn.ReLU(),                       # 3
        nn.MaxPool2d(2),                 # 4
        nn.Flatten(),                    # 5
        nn.Linear(8 * 4 * 4, 3),         # 6
    )


def toy_hooks():
    return [HookPoint("c1", "1", "conv"),
            HookPoint("c2", "3", "conv"),
            HookPoint("out", "6", "global")]


def toy_plan(out_dir, n=10, labels=True, seed=0):
    torch.manual_seed(seed + 1)
    x = torch.randn(n, 1, 8, 8)
    y = torch.randint(0, 3, (n,)) if labels else None
    return ExportPlan(toy_cnn(seed), x, y, toy_hooks(), out_dir)


def trace_receptive_field(stages, lower_shape, p):
    """Dependency-tracing oracle, independent of the geometry module."""
    h, w = lower_shape
    grid = [[{(i, j)} for j in range(w)] for i in range(h)]
    for stg in stages:
        (kh, kw), (sh, sw), (ph, pw) = stg
        ch, cw = len(grid), len(grid[0])
        padded = [[set() for _ in range(cw + 2 * pw)]
                  for _ in range(ch + 2 * ph)]
        for i in range(ch):
            for j in range(cw):
                padded[i + ph][j + pw] = grid[i][j]
        oh = (ch + 2 * ph - kh) // sh + 1
        ow = (cw + 2 * pw - kw) // sw + 1
        out = [[set() for _ in range(ow)] for _ in range(oh)]
        for i in range(oh):
            for j in range(ow):
                for di in range(kh):
                    for dj in range(kw):
                        out[i][j] |= padded[i * sh + di][j * sw + dj]
        grid = out
    return grid[p[0]][p[1]]


def test_export_roundtrip_passes_store_validation(tmp_path):
    plan = toy_plan(tmp_path / "store")
    export(plan)
    store = open_store(tmp_path / "store")  # raises if anything is invalid
    assert store.example_count == 10
    assert store.layers["c1"].kind == "conv"
    assert store.layers["c1"].shape == (8, 8, 4)
    assert store.layers["c2"].shape == (8, 8, 8)
    assert store.layers["out"].shape == (3,)
    assert store.labels().shape == (10,)
    assert store.predictions().shape == (10,)


def test_no_negative_post_relu_values(tmp_path):
    plan = toy_plan(tmp_path / "store")
    export(plan)
    store = open_store(tmp_path / "store")
    for lid in ("c1", "c2"):
        assert float(store.layer(lid).min()) >= 0.0


def test_predictions_match_direct_forward(tmp_path):
    plan = toy_plan(tmp_path / "store", seed=3)
    export(plan)
    store = open_store(tmp_path / "store")
    model = toy_cnn(3)
    model.eval()
    torch.manual_seed(4)
    with torch.no_grad():
        logits = model(plan.inputs)
    np.testing.assert_array_equal(store.predictions(),
                                  torch.argmax(logits, dim=1).numpy())
    # activations of the hooked layer match a direct partial forward
    with torch.no_grad():
        c1 = model[1](model[0](plan.inputs)).permute(0, 2, 3, 1).numpy()
    np.testing.assert_allclose(store.layer("c1"), c1, atol=1e-6)


def test_geometry_matches_tracing_oracle(tmp_path):
    plan = toy_plan(tmp_path / "store")
    export(plan)
    store = open_store(tmp_path / "store")
    pairs = {(p["upper"], p["lower"]): p["stages"]
             for p in store.geometry_pairs()}
    assert set(pairs) == {("c2", "c1"), ("out", "c2")}
    assert pairs[("out", "c2")] == []  # global layer sees everything
    stages = pairs[("c2", "c1")]
    fm = compose([StageSpec.from_dict(s) for s in stages], (8, 8))
    raw = [(tuple(s["kernel"]), tuple(s["stride"]), tuple(s["padding"]))
           for s in stages]
    for p in [(0, 0), (3, 4), (7, 7)]:
        got, clipped = window(fm, p)
        expected = trace_receptive_field(raw, (8, 8), p)
        if clipped == 0:
            assert set(got) == expected
        else:
            assert set(got) >= expected


def test_stacked_convs_extent_5():
    model = nn.Sequential(
        nn.Conv2d(1, 2, 3, padding=1), nn.ReLU(),
        nn.Conv2d(2, 2, 3, padding=1), nn.ReLU(),
        nn.Conv2d(2, 2, 3, padding=1), nn.Flatten(), nn.Linear(2 * 64, 2))
    plan = ExportPlan(model, torch.randn(2, 1, 8, 8), None,
                      [HookPoint("a", "1", "conv"),
                       HookPoint("b", "4", "conv")],
                      out_dir=Path("unused"), batch_size=2)
    geo = geometry_stages(model, plan)
    stages = [StageSpec.from_dict(s) for s in geo["pairs"][0]["stages"]]
    assert compose(stages, (8, 8)).extent == (5, 5)


def test_export_twice_identical_bytes(tmp_path):
    export(toy_plan(tmp_path / "a", seed=5))
    export(toy_plan(tmp_path / "b", seed=5))
    files = sorted(p.relative_to(tmp_path / "a")
                   for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == \
            (tmp_path / "b" / rel).read_bytes()


def test_plan_validation(tmp_path):
    model = toy_cnn()
    x = torch.randn(2, 1, 8, 8)
    with pytest.raises(ExportError, match="at least one hook"):
        ExportPlan(model, x, None, [], tmp_path / "s")
    with pytest.raises(ExportError, match="unique"):
        ExportPlan(model, x, None,
                   [HookPoint("a", "1", "conv"), HookPoint("a", "3", "conv")],
                   tmp_path / "s")
    with pytest.raises(ExportError, match="unknown kind"):
        HookPoint("a", "1", "weird")
    full = tmp_path / "full"
    full.mkdir()
    (full / "x").write_text("x")
    with pytest.raises(ExportError, match="not empty"):
        ExportPlan(model, x, None, toy_hooks(), full)


def test_hook_resolution_failure(tmp_path):
    plan = toy_plan(tmp_path / "s")
    plan.hooks = [HookPoint("a", "totally.missing", "conv")]
    with pytest.raises(ExportError, match="hook module"):
        export(plan)


def test_opaque_module_between_conv_hooks(tmp_path):
    model = nn.Sequential(nn.Conv2d(1, 2, 3), nn.Upsample(scale_factor=2),
                          nn.Conv2d(2, 2, 3), nn.Flatten(),
                          nn.Linear(2 * 64, 2))
    plan = ExportPlan(model, torch.randn(2, 1, 10, 10), None,
                      [HookPoint("a", "0", "conv"),
                       HookPoint("b", "2", "conv")], tmp_path / "s")
    with pytest.raises(ExportError, match="unknown geometry"):
        export(plan)


def test_cli_saved_model(tmp_path):
    model = toy_cnn(7)
    model.eval()
    torch.save(model, tmp_path / "model.pt")
    torch.manual_seed(8)
    torch.save({"inputs": torch.randn(6, 1, 8, 8),
                "labels": torch.randint(0, 3, (6,))}, tmp_path / "data.pt")
    rc = cli_main([
        "--model", str(tmp_path / "model.pt"),
        "--data", str(tmp_path / "data.pt"),
        "--layer", "c1=1:conv", "--layer", "c2=3:conv",
        "--layer", "out=6:global",
        "--out", str(tmp_path / "store"), "--batch-size", "4"])
    assert rc == 0
    store = open_store(tmp_path / "store")
    assert store.example_count == 6
    assert store.layers["c1"].shape == (8, 8, 4)
    assert {(p["upper"], p["lower"]) for p in store.geometry_pairs()} \
        == {("c2", "c1"), ("out", "c2")}


def test_cli_bad_layer_spec(tmp_path, capsys):
    torch.save(toy_cnn(), tmp_path / "m.pt")
    torch.save({"inputs": torch.randn(2, 1, 8, 8)}, tmp_path / "d.pt")
    rc = cli_main(["--model", str(tmp_path / "m.pt"),
                   "--data", str(tmp_path / "d.pt"),
                   "--layer", "garbage", "--out", str(tmp_path / "s")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err
