import numpy as np
import pytest

from dgmn.analysis import (CostReport, ScalingReport, count_flops, count_params,
                           nonlocal_attention_macs, nonlocal_cost, scaling_report)
from dgmn.errors import ConfigError
from dgmn.layer import DgmnConfig, init_params, num_scalars


def cfg512(variant="da-dw", rates=(1,)):
    da = "da" in variant.split("-")
    dw = "dw" in variant.split("-")
    ds = "ds" in variant.split("-")
    return DgmnConfig(channels=512, rates=rates, groups=4,
                      enable_da=da, enable_dw=dw, enable_ds=ds)


# Frozen closed-form values, recomputed by hand:
#   value/output transform: 512 * (512 + 1) = 262,656 each
#   joint predictor (da+dw): (9*4 + 9) * (512*9 + 1) = 45 * 4609 = 207,405
#   affinity-only predictor: 9 * 4609 = 41,481; static table 9 * 4 = 36
#   plus S = 1 message scale and 1 residual scale
PARAMS_DA_DW = 2 * 262_656 + 207_405 + 2            # = 732,719
PARAMS_DA = 2 * 262_656 + 41_481 + 36 + 2           # = 566,831
# MACs at 97 x 97 (N = 9409):
#   transforms: 2 * 9409 * 512^2           = 4,933,025,792
#   predictor:  9409 * 45 * 512 * 9        = 1,951,050,240  (da: 390,210,048)
#   gather:     9409 * 9 * 512 * 4         =   173,426,688
#   aggregate:  9409 * 9 * 512 * 2         =    86,713,344
#   softmax:    9409 * 9 * 4               =       338,724
FLOPS_DA_DW = 4_933_025_792 + 1_951_050_240 + 173_426_688 + 86_713_344 + 338_724
FLOPS_DA = 4_933_025_792 + 390_210_048 + 173_426_688 + 86_713_344 + 338_724
# Dense attention reference (C = 512, bottleneck 256, behind a 3x3 context conv):
#   params: 512*4609 + 3*256*513 + 512*257 = 2,885,376
#   macs:   9409*512*512*9 + 3*9409*256*512 + 9409*512*256 + 2*9409^2*256
NL_PARAMS = 2_359_808 + 3 * 131_328 + 131_584
NL_FLOPS = 22_198_616_064 + 3_699_769_344 + 1_233_256_448 + 45_326_991_872


def test_frozen_param_counts():
    assert count_params(cfg512("da-dw")).total_params == 732_719 == PARAMS_DA_DW
    assert count_params(cfg512("da")).total_params == 566_831 == PARAMS_DA


def test_frozen_flop_counts():
    assert count_flops(cfg512("da-dw"), 97, 97).total_macs == FLOPS_DA_DW
    assert count_flops(cfg512("da"), 97, 97).total_macs == FLOPS_DA
    assert FLOPS_DA_DW == 7_144_554_788
    assert FLOPS_DA == 5_583_714_596


def test_frozen_nonlocal_counts():
    nl = nonlocal_cost(512, 97, 97)
    assert nl.total_params == NL_PARAMS == 2_885_376
    assert nl.total_macs == NL_FLOPS == 72_458_633_728
    assert nonlocal_attention_macs(nl) == 45_326_991_872


def test_acceptance_windows():
    assert 0.69e6 <= PARAMS_DA_DW <= 0.77e6
    assert 0.54e6 <= PARAMS_DA <= 0.60e6
    assert 6.0e9 <= FLOPS_DA_DW <= 7.8e9
    assert 4.9e9 <= FLOPS_DA <= 6.0e9
    assert FLOPS_DA_DW / NL_FLOPS <= 0.15
    assert 0.20 <= PARAMS_DA_DW / NL_PARAMS <= 0.30


@pytest.mark.parametrize("kw", [
    dict(channels=8, rates=(1,), groups=2),
    dict(channels=8, rates=(1, 2), groups=2),
    dict(channels=16, rates=(1, 6, 12), groups=4, enable_ds=False),
    dict(channels=8, rates=(1, 4), groups=2, enable_dw=False, enable_ds=False),
    dict(channels=12, rates=(2,), groups=3, enable_da=False),
    dict(channels=512, rates=(1, 6, 12, 24, 36), groups=4),
    dict(channels=8, rates=(1,), groups=8),  # degenerate G = C
])
def test_count_params_matches_constructed_layer(kw):
    cfg = DgmnConfig(**kw)
    assert count_params(cfg).total_params == num_scalars(init_params(cfg, 0))


def test_degenerate_group_count_formula():
    # G = C: the joint predictor emits K*C + K channels
    cfg = DgmnConfig(channels=8, rates=(1,), groups=8)
    report = count_params(cfg)
    dyn = next(r for r in report.rows if r.name.startswith("dyn_conv"))
    assert dyn.params == (9 * 8 + 9) * (8 * 9 + 1)


def test_flop_monotonicity():
    base = count_flops(cfg512("da-dw"), 32, 32).total_macs
    assert count_flops(cfg512("da-dw"), 64, 32).total_macs > base
    assert count_flops(cfg512("da-dw"), 32, 64).total_macs > base
    bigger_c = DgmnConfig(channels=1024, rates=(1,), groups=4)
    assert count_flops(bigger_c, 32, 32).total_macs > base
    more_rates = cfg512("da-dw", rates=(1, 6))
    assert count_flops(more_rates, 32, 32).total_macs > base
    more_groups = DgmnConfig(channels=512, rates=(1,), groups=8)
    assert count_flops(more_groups, 32, 32).total_macs > base


def test_totals_equal_row_sums():
    rep = count_flops(cfg512("da-dw-ds", rates=(1, 6, 12)), 33, 65)
    assert rep.total_params == sum(r.params for r in rep.rows)
    assert rep.total_macs == sum(r.macs for r in rep.rows)
    assert all(r.params >= 0 and r.macs >= 0 for r in rep.rows)


def test_scaling_slopes_and_growth():
    report = scaling_report(cfg512("da-dw"), [32, 64, 128])
    assert 1.9 <= report.nonlocal_attention_slope <= 2.0
    assert 0.99 <= report.dgmn_slope <= 1.01
    # doubling h and w: attention term x16 exactly, sampled layer x4
    a = nonlocal_cost(512, 32, 32)
    b = nonlocal_cost(512, 64, 64)
    assert nonlocal_attention_macs(b) == 16 * nonlocal_attention_macs(a)
    ratio = count_flops(cfg512("da-dw"), 64, 64).total_macs / \
        count_flops(cfg512("da-dw"), 32, 32).total_macs
    assert ratio <= 4.2


def test_ratio_at_97():
    dgmn = count_flops(cfg512("da-dw"), 97, 97).total_macs
    nl = nonlocal_cost(512, 97, 97).total_macs
    assert dgmn / nl <= 0.15


def test_cost_report_roundtrips():
    rep = count_flops(cfg512("da-dw"), 12, 13)
    d = rep.to_json_dict()
    assert CostReport.from_json_dict(d).to_json_dict() == d
    text = rep.to_csv_text()
    back = CostReport.from_csv_text(text, rep.config, rep.note)
    assert back.to_csv_text() == text
    with pytest.raises(ConfigError):
        CostReport.from_csv_text(_tamper_total(text))


def _tamper_total(text: str) -> str:
    lines = text.strip().splitlines()
    name, p, m = lines[-1].split(",")
    lines[-1] = f"{name},{int(p) + 1},{m}"
    return "\n".join(lines) + "\n"


def test_scaling_report_roundtrip():
    rep = scaling_report(cfg512("da-dw"), [16, 32])
    text = rep.to_csv_text()
    back = ScalingReport.from_csv_text(text, rep.config)
    assert back.to_csv_text() == text
    assert back.to_json_dict()["rows"] == rep.to_json_dict()["rows"]


def test_scaling_requires_sizes():
    with pytest.raises(ConfigError):
        scaling_report(cfg512(), [])


def test_nonlocal_cost_odd_channels():
    with pytest.raises(ConfigError):
        nonlocal_cost(511, 8, 8)


def test_count_flops_bad_size():
    with pytest.raises(ConfigError):
        count_flops(cfg512(), 0, 5)