"""Closed-form parameter and FLOP accounting.

Counting convention: one multiply-accumulate (MAC) is counted as one FLOP.
Convolution cost is h*w*c_out*(c_in/groups)*k^2 MACs (bias adds excluded);
the bilinear gather costs 4 MACs per tap per channel, the message
aggregation 2 (affinity * weight * feature), and each affinity softmax 4
FLOPs per tap. Parameter counts include biases.

The fully-connected attention reference is the C/2-bottleneck block behind a
3x3 C->C context convolution, the configuration it is deployed with in
segmentation heads; its attention term costs 2 * N^2 * (C/2) MACs for N
positions, which is what makes it quadratic in image size. Report rows keep
the context convolution separate so either accounting can be read off.

The default 97x97 evaluation grid is the stride-8 output of a 769x769 crop;
it is a parameter of the report, not a constant of the formulas.
"""

from __future__ import annotations

import csv
import io
import json

import numpy as np

from .errors import ConfigError
from .dynamics import dyn_out_channels
from .layer import DgmnConfig

CONVENTION_NOTE = (
    "1 MAC = 1 FLOP; conv cost h*w*c_out*(c_in/groups)*k^2 MACs (bias adds "
    "excluded); gather 4 and aggregation 2 MACs per tap per channel; softmax "
    "4 FLOPs per tap; parameter counts include biases."
)


class CostRow:
    def __init__(self, name: str, params: int = 0, macs: int = 0):
        self.name = name
        self.params = int(params)
        self.macs = int(macs)


class CostReport:
    """Per-component cost rows plus a configuration echo."""

    def __init__(self, rows, config: dict, note: str = CONVENTION_NOTE):
        self.rows = list(rows)
        self.config = dict(config)
        self.note = note

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "note": self.note,
            "rows": [{"name": r.name, "params": r.params, "macs": r.macs}
                     for r in self.rows],
            "total_params": self.total_params,
            "total_macs": self.total_macs,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CostReport":
        rows = [CostRow(r["name"], r["params"], r["macs"]) for r in d["rows"]]
        return cls(rows, d["config"], d["note"])

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", "params", "macs"])
        for r in self.rows:
            writer.writerow([r.name, r.params, r.macs])
        writer.writerow(["total", self.total_params, self.total_macs])
        return buf.getvalue()

    @classmethod
    def from_csv_text(cls, text: str, config: dict | None = None,
                      note: str = CONVENTION_NOTE) -> "CostReport":
        rows = []
        total = None
        for rec in csv.DictReader(io.StringIO(text)):
            if rec["name"] == "total":
                total = (int(rec["params"]), int(rec["macs"]))
                continue
            rows.append(CostRow(rec["name"], int(rec["params"]), int(rec["macs"])))
        report = cls(rows, config or {}, note)
        if total is not None and total != (report.total_params, report.total_macs):
            raise ConfigError("cost CSV total row does not match the sum of rows")
        return report


def _conv_params(c_in: int, c_out: int, k: int) -> int:
    return c_out * (c_in * k * k + 1)


def _dgmn_rows(cfg: DgmnConfig, height: int | None, width: int | None):
    """Shared row builder; MACs are zero when no spatial size is given."""
    C, K, G, k = cfg.channels, cfg.taps, cfg.groups, cfg.kernel_size
    npos = (height * width) if height else 0
    rows = [
        CostRow("value_transform", _conv_params(C, C, 1), npos * C * C),
        CostRow("output_transform", _conv_params(C, C, 1), npos * C * C),
    ]
    dyn_out = dyn_out_channels(K, G, cfg.enable_dw, cfg.enable_da)
    for rate in cfg.rates:
        rows.append(CostRow(f"dyn_conv_rate{rate}", _conv_params(C, dyn_out, k),
                            npos * dyn_out * C * k * k))
        if cfg.enable_ds:
            rows.append(CostRow(f"walk_conv_rate{rate}", _conv_params(C, 2 * K, k),
                                npos * 2 * K * C * k * k))
        rows.append(CostRow(f"gather_rate{rate}", 0, npos * K * C * 4))
        rows.append(CostRow(f"aggregate_rate{rate}", 0, npos * K * C * 2))
        if cfg.enable_da:
            rows.append(CostRow(f"affinity_softmax_rate{rate}", 0, npos * K * 4))
    if not cfg.enable_dw:
        rows.append(CostRow("static_weights", K * G, 0))
    rows.append(CostRow("message_scales", cfg.num_rates, 0))
    rows.append(CostRow("residual_scale", 1, 0))
    return rows


def _echo(cfg: DgmnConfig, height=None, width=None) -> dict:
    d = {"model": "dgmn", **cfg.to_dict()}
    if height is not None:
        d.update(height=height, width=width)
    return d


def count_params(cfg: DgmnConfig) -> CostReport:
    """Closed-form parameter counts; exactly matches a constructed layer."""
    return CostReport(_dgmn_rows(cfg, None, None), _echo(cfg))


def count_flops(cfg: DgmnConfig, height: int, width: int) -> CostReport:
    if height < 1 or width < 1:
        raise ConfigError(f"spatial size must be positive, got {height}x{width}")
    return CostReport(_dgmn_rows(cfg, height, width), _echo(cfg, height, width))


def nonlocal_cost(channels: int, height: int | None = None,
                  width: int | None = None) -> CostReport:
    """Cost of the fully-connected attention reference at the same width."""
    if channels % 2 != 0:
        raise ConfigError(f"attention reference needs even channels, got {channels}")
    C = channels
    half = C // 2
    npos = (height * width) if height else 0
    rows = [
        CostRow("context_conv3x3", _conv_params(C, C, 3), npos * C * C * 9),
        CostRow("theta", _conv_params(C, half, 1), npos * half * C),
        CostRow("phi", _conv_params(C, half, 1), npos * half * C),
        CostRow("g", _conv_params(C, half, 1), npos * half * C),
        CostRow("out", _conv_params(half, C, 1), npos * C * half),
        CostRow("attention_scores", 0, npos * npos * half),
        CostRow("attention_aggregate", 0, npos * npos * half),
    ]
    config = {"model": "nonlocal", "channels": C, "bottleneck": half}
    if height is not None:
        config.update(height=height, width=width)
    return CostReport(rows, config)


def nonlocal_attention_macs(report: CostReport) -> int:
    return sum(r.macs for r in report.rows if r.name.startswith("attention"))


# ---------------------------------------------------------------------------
# Scaling study
# ---------------------------------------------------------------------------

class ScalingRow:
    def __init__(self, side, positions, dgmn_macs, nonlocal_macs, attention_macs):
        self.side = int(side)
        self.positions = int(positions)
        self.dgmn_macs = int(dgmn_macs)
        self.nonlocal_macs = int(nonlocal_macs)
        self.attention_macs = int(attention_macs)


class ScalingReport:
    """FLOPs versus position count, with fitted log-log slopes."""

    def __init__(self, rows, config: dict):
        self.rows = list(rows)
        self.config = dict(config)

    def _slope(self, values) -> float:
        # reported at 1e-9 resolution; below that only fit roundoff remains
        xs = np.log([r.positions for r in self.rows])
        return float(round(np.polyfit(xs, np.log(values), 1)[0], 9))

    @property
    def dgmn_slope(self) -> float:
        return self._slope([r.dgmn_macs for r in self.rows])

    @property
    def nonlocal_attention_slope(self) -> float:
        return self._slope([r.attention_macs for r in self.rows])

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "rows": [vars(r) for r in self.rows],
            "dgmn_slope": self.dgmn_slope,
            "nonlocal_attention_slope": self.nonlocal_attention_slope,
        }

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["side", "positions", "dgmn_macs", "nonlocal_macs",
                         "nonlocal_attention_macs"])
        for r in self.rows:
            writer.writerow([r.side, r.positions, r.dgmn_macs, r.nonlocal_macs,
                             r.attention_macs])
        return buf.getvalue()

    @classmethod
    def from_csv_text(cls, text: str, config: dict | None = None) -> "ScalingReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            rows.append(ScalingRow(rec["side"], rec["positions"], rec["dgmn_macs"],
                                   rec["nonlocal_macs"], rec["nonlocal_attention_macs"]))
        return cls(rows, config or {})


def scaling_report(cfg: DgmnConfig, sides) -> ScalingReport:
    """Evaluate both cost models over square grids of the given side lengths."""
    sides = [int(s) for s in sides]
    if not sides:
        raise ConfigError("scaling_report needs at least one size")
    rows = []
    for side in sides:
        dg = count_flops(cfg, side, side)
        nl = nonlocal_cost(cfg.channels, side, side)
        rows.append(ScalingRow(side, side * side, dg.total_macs, nl.total_macs,
                               nonlocal_attention_macs(nl)))
    return ScalingReport(rows, _echo(cfg))


def write_json(obj, path) -> None:
    d = obj.to_json_dict() if hasattr(obj, "to_json_dict") else obj
    with open(path, "w") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv_text(text: str, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)
