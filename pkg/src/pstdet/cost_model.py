"""Static cost analysis of a layer list: shapes, MACs, parameters, receptive fields."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

if TYPE_CHECKING:
    from pstdet.tensor_nn import LayerSpec


def conv_output_shape(H: int, W: int, f: int, p: int, s: int) -> tuple[int, int]:
    """Spatial output size of a conv/pool window: ``floor((H - f + 2p) / s) + 1``."""
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {s}")
    oh = (H - f + 2 * p) // s + 1
    ow = (W - f + 2 * p) // s + 1
    if H - f + 2 * p < 0 or W - f + 2 * p < 0 or oh < 1 or ow < 1:
        raise ValueError(f"window f={f} p={p} s={s} does not fit a {H}x{W} input")
    return oh, ow


def conv_macs(f: int, c_i: int, c_f: int, H_out: int, W_out: int) -> int:
    """Multiply-accumulates of one conv layer: ``f^2 * c_i * c_f * W' * H'``."""
    for v in (f, c_i, c_f, H_out, W_out):
        if v < 1:
            raise ValueError("all conv_macs arguments must be >= 1")
    return f * f * c_i * c_f * W_out * H_out


def fc_params(I: int, J: int) -> int:
    """Weight count of a fully connected layer (biases excluded)."""
    if I < 1 or J < 1:
        raise ValueError("fc_params needs I, J >= 1")
    return I * J


def receptive_field(layers: Sequence["LayerSpec"]) -> list[int]:
    """Receptive field after each conv/pool layer.

    ``r_n = r_{n-1} + (f_n - 1) * prod(s_1 .. s_{n-1})`` with ``r_0 = 1``.
    Activation and fully connected layers have no window and are skipped;
    :func:`network_cost` reports the full input extent for the latter.
    """
    r, jump = 1, 1
    out = []
    for spec in layers:
        if not spec.spatial:
            continue
        r += (spec.f - 1) * jump
        jump *= spec.s
        out.append(r)
    return out


@dataclass(frozen=True)
class LayerCost:
    index: int
    kind: str
    macs: int
    params: int
    biases: int
    out_c: int
    out_h: int
    out_w: int
    receptive_field: int
    # fully connected layers only: I * 2, the two-class head size
    two_class_params: int = 0


@dataclass(frozen=True)
class NetworkCost:
    layers: list[LayerCost]

    @property
    def total_macs(self) -> int:
        return sum(c.macs for c in self.layers)

    @property
    def total_params(self) -> int:
        return sum(c.params for c in self.layers)

    @property
    def total_biases(self) -> int:
        return sum(c.biases for c in self.layers)

    @property
    def total(self) -> int:
        return self.total_params + self.total_biases


def network_cost(layers: Sequence["LayerSpec"], input_shape: tuple[int, int, int]) -> NetworkCost:
    """Per-layer cost table. Pooling and activations are free."""
    from pstdet.tensor_nn import ShapeError, output_shape

    shape = tuple(input_shape)
    r, jump = 1, 1
    extent = max(shape[1:]) if len(shape) == 3 else 1
    rows = []
    for i, spec in enumerate(layers):
        out = output_shape(spec, shape, i)
        macs = params = biases = two_class = 0
        if spec.kind == "conv":
            macs = conv_macs(spec.f, shape[0], spec.c_f, out[1], out[2])
            params = spec.f * spec.f * shape[0] * spec.c_f
            biases = spec.c_f
        elif spec.kind == "fullyconnected":
            n_in = 1
            for d in shape:
                n_in *= d
            params = fc_params(n_in, spec.j)
            macs = params
            biases = spec.j
            two_class = fc_params(n_in, 2)
        if spec.spatial:
            r += (spec.f - 1) * jump
            jump *= spec.s
        rf = extent if spec.kind == "fullyconnected" else r
        oc, oh, ow = (out[0], out[1], out[2]) if len(out) == 3 else (out[0], 1, 1)
        if min(oc, oh, ow) < 1:
            raise ShapeError(i, f"empty output {out}")
        rows.append(LayerCost(i, spec.kind, macs, params, biases, oc, oh, ow, rf, two_class))
        shape = out
    return NetworkCost(rows)


def cost_csv(cost: NetworkCost) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "kind", "out_c", "out_h", "out_w", "macs", "params", "biases", "two_class_params", "receptive_field"])
    for c in cost.layers:
        w.writerow([c.index, c.kind, c.out_c, c.out_h, c.out_w, c.macs, c.params, c.biases, c.two_class_params, c.receptive_field])
    w.writerow(["total", "", "", "", "", cost.total_macs, cost.total_params, cost.total_biases, "", ""])
    return buf.getvalue()


def rf_csv(layers: Sequence["LayerSpec"], input_size: int | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["layer", "kind", "f", "s", "receptive_field"]
    if input_size:
        header.append("area_fraction")
    w.writerow(header)
    spatial = [(i, s) for i, s in enumerate(layers) if s.spatial]
    for (i, spec), r in zip(spatial, receptive_field(layers)):
        row = [i, spec.kind, spec.f, spec.s, r]
        if input_size:
            row.append(f"{min(r, input_size) ** 2 / input_size**2:.6f}")
        w.writerow(row)
    return buf.getvalue()
