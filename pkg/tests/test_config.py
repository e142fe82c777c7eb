import pytest

from threearm_ssr.config import ConfigError, build_scenarios, load_config, parse_config
from threearm_ssr.design import AllocationRatio
from threearm_ssr.estimators import Method
from threearm_ssr.presets import POWER_N1, T1E_DELTA_ER, T1E_N1, preset

GOOD = """\
[design]
mu_P = 0.9
delta_ER = 0.3   # non-inferiority margin
alloc = 1:1:1

[policy]
method = XG
n1 = 30

[grid]
n1 = 30, 90
method = OS, xg

[run]
reps = 1000
seed = 17
"""


def test_parse_and_expand():
    cfg = parse_config(GOOD)
    assert cfg.reps == 1000 and cfg.seed == 17
    points = cfg.points()
    assert [(p["method"], p["n1"]) for p in points] == [
        (Method.OS, 30), (Method.OS, 90), (Method.XG, 30), (Method.XG, 90)
    ]
    scenarios = build_scenarios(cfg)
    assert len(scenarios) == 4
    assert scenarios[2].policy.m == 3
    assert all(s.seed == 17 and s.reps == 1000 for s in scenarios)


def test_overrides():
    cfg = parse_config(GOOD)
    sc = build_scenarios(cfg, reps=50, seed=3)
    assert all(s.reps == 50 and s.seed == 3 for s in sc)


def test_empty_grid_axis_gives_no_scenarios():
    cfg = parse_config("[design]\nmu_P = 0.6\n[grid]\nn1 =\n")
    assert build_scenarios(cfg) == []


def test_type1_kind_uses_boundary_and_default_reps():
    cfg = parse_config("[design]\nmu_P = 0.6\n[policy]\nmethod = OS\n[run]\nkind = t1e_ER\n")
    (sc,) = build_scenarios(cfg)
    assert sc.target == "ER" and sc.truth == (0.3, 0.0, 0.6) and sc.reps == 50000


def test_zeta_auto():
    cfg = parse_config("[design]\nmu_P = 0.9\n[policy]\nn1 = 60\nzeta = auto\nzeta_sigma = 1.0\n")
    (sc,) = build_scenarios(cfg)
    assert sc.policy.zeta > 1
    bad = parse_config("[design]\nmu_P = 0.9\n[policy]\nmethod = OS\nzeta = auto\n")
    with pytest.raises(ValueError):
        build_scenarios(bad)


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("[design]\nmu_P = 0.9\n[run]\nreps = abc\n", ":4: [run] reps"),
        ("[design]\nmu_P = 0.9\nbogus = 1\n", ":3: [design] bogus"),
        ("[design]\nmu_P = 0.9\n[policy]\nmethod = XYZ\n", ":4: [policy] method"),
        ("[design]\nmu_P = 0.9\n[grid]\nalloc = 1:1\n", ":4: [grid] alloc"),
        ("[design]\nmu_P = 0.9\n[grid]\nsigma_x = 1\n", ":4: [grid] sigma_x"),
        ("[design]\nmu_P = 0.9\n[other]\nx = 1\n", ":3: unknown section"),
        ("[design]\nmu_P = 0.9\nmu_P = 0.6\n", ":3:"),
        ("mu_P = 0.9\n", ":1:"),
        ("[design]\ndelta_ER = 0.3\n", "[design] mu_P"),
        ("[design]\nmu_P = 0.9\n[run]\nseed = -4\n", ":4: [run] seed"),
    ],
)
def test_errors_name_line_and_key(text, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "cfg.ini")
    assert fragment in str(info.value)
    assert str(info.value).startswith("cfg.ini")


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


def test_duplicate_scenarios_rejected():
    cfg = parse_config("[design]\nmu_P = 0.9\n[grid]\nn1 = 30, 30\n")
    with pytest.raises(ConfigError):
        build_scenarios(cfg)


def test_presets_carry_the_published_grids():
    fig2 = preset("fig2")
    assert fig2.grid["n1"] == list(range(30, 391, 30)) == list(POWER_N1)
    assert fig2.grid["mu_P"] == [0.6, 0.9]
    assert fig2.grid["alloc"] == [AllocationRatio(1, 1, 1), AllocationRatio(3, 2, 1)]
    assert fig2.base["alpha"] == 0.025 and fig2.base["delta_ER"] == 0.3
    assert fig2.base["delta_EP"] == fig2.base["delta_RP"] == 0.0
    t1e = preset("t1e")
    assert t1e.grid["n1"] == [30, 90, 150, 210, 270, 330, 390] == list(T1E_N1)
    assert t1e.grid["delta_ER"] == list(T1E_DELTA_ER) == [0.2, 0.3, 0.4, 0.5]
    # 112 designs per hypothesis and method
    per = len(t1e.points()) // (len(t1e.grid["kind"]) * len(t1e.grid["method"]))
    assert per == 112
    assert len(preset("table4").points()) == 4
    with pytest.raises(ValueError):
        preset("fig9")
