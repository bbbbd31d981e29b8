"""Receptive-field geometry between two modeled layers.

A chain of conv/pool stages induces an affine map from an upper-layer
position p to a window of lower-layer positions:

    window(p) = { scale * p + o : o in O },  O = origin + [0, extent)^2

Nonlinearities and batch norm are geometry-transparent and not modeled.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class StageSpec:
    kernel: tuple
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)

    def __post_init__(self):
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ConfigError("kernel and stride must be >= 1")
        if any(p < 0 for p in self.padding):
            raise ConfigError("padding must be >= 0")

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["kernel"]), tuple(d.get("stride", (1, 1))),
                   tuple(d.get("padding", (0, 0))))


@dataclass(frozen=True)
class FieldMap:
    scale: tuple
    origin: tuple
    extent: tuple
    upper_shape: tuple
    lower_shape: tuple

    @property
    def offsets(self):
        """The full offset set O (before boundary clipping), row-major."""
        oy, ox = self.origin
        ey, ex = self.extent
        return [(oy + i, ox + j) for i in range(ey) for j in range(ex)]


def _stage_out(extent, k, s, p):
    out = (extent + 2 * p - k) // s + 1
    if out < 1:
        raise ConfigError(f"stage collapses grid extent {extent} to {out}")
    return out


def compose(stages, lower_shape):
    """Compose a bottom-up chain of stages into a FieldMap.

    stages[0] consumes the lower layer; stages[-1] produces the upper layer.
    """
    if not stages:
        raise ConfigError("stage list must be nonempty")
    upper = tuple(lower_shape)
    for st in stages:
        upper = tuple(
            _stage_out(upper[a], st.kernel[a], st.stride[a], st.padding[a])
            for a in (0, 1)
        )
    scale, origin, extent = (1, 1), (0, 0), (1, 1)
    for st in reversed(stages):
        scale = tuple(scale[a] * st.stride[a] for a in (0, 1))
        origin = tuple(origin[a] * st.stride[a] - st.padding[a] for a in (0, 1))
        extent = tuple((extent[a] - 1) * st.stride[a] + st.kernel[a] for a in (0, 1))
    return FieldMap(scale, origin, extent, upper, tuple(lower_shape))


def full_field(lower_shape, upper_shape=(1, 1)):
    """FieldMap whose every window covers the whole lower grid.

    Used for global upper layers, where one "position" sees everything.
    """
    return FieldMap((1, 1), (0, 0), tuple(lower_shape), tuple(upper_shape),
                    tuple(lower_shape))


def window(fm: FieldMap, p):
    """Valid lower-layer positions in the receptive field of p.

    Returns (positions, clipped_count); positions outside the lower grid
    (reachable only through padding) are excluded and counted as clipped.
    """
    py, px = p
    if not (0 <= py < fm.upper_shape[0] and 0 <= px < fm.upper_shape[1]):
        raise ConfigError(f"position {p} outside upper grid {fm.upper_shape}")
    ay = fm.scale[0] * py + fm.origin[0]
    ax = fm.scale[1] * px + fm.origin[1]
    hl, wl = fm.lower_shape
    positions = []
    clipped = 0
    for dy in range(fm.extent[0]):
        for dx in range(fm.extent[1]):
            qy, qx = ay + dy, ax + dx
            if 0 <= qy < hl and 0 <= qx < wl:
                positions.append((qy, qx))
            else:
                clipped += 1
    return positions, clipped


def field_map_for_pair(store, upper_id, lower_id):
    """Build the FieldMap declared in the store manifest for a layer pair."""
    up = store.layers[upper_id]
    low = store.layers[lower_id]
    if up.kind == "global":
        return full_field(low.grid)
    for pair in store.geometry_pairs():
        if pair["upper"] == upper_id and pair["lower"] == lower_id:
            stages = [StageSpec.from_dict(s) for s in pair.get("stages", [])]
            if not stages:
                return full_field(low.grid, up.grid)
            fm = compose(stages, low.grid)
            if fm.upper_shape != up.grid:
                raise ConfigError(
                    f"geometry for ({upper_id}, {lower_id}) yields upper grid "
                    f"{fm.upper_shape}, manifest says {up.grid}"
                )
            return fm
    raise ConfigError(f"no geometry declared for pair ({upper_id}, {lower_id})")
