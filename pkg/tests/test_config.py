import math

import pytest

from cbflow.config import ConfigError, RunConfig
from cbflow.verify import shipped_configs


def test_empty_text_is_default():
    cfg = RunConfig.from_text("")
    assert cfg == RunConfig()
    assert cfg.make_grid().sizes == (8, 8, 1, 1)


def test_round_trip():
    text = """
[grid]
sizes = 16, 16, 1, 1
[initial]
family = doubly_warped
amplitude = 0.07
active = 2
conformal = 0.05:0,1,0,0:0.5; 0.03:1,1,0,0:1.3
[flow]
s0 = -0.1
dt =
t_end = 0.5
max_steps =
"""
    cfg = RunConfig.from_text(text)
    assert cfg.flow.dt is None and cfg.flow.max_steps is None
    assert cfg.initial.active == 2 and len(cfg.conformal_modes()) == 2
    again = RunConfig.from_text(cfg.to_text())
    assert again == cfg


def test_infinite_horizon_survives_round_trip():
    cfg = RunConfig()
    assert math.isinf(RunConfig.from_text(cfg.to_text()).flow.t_end)


@pytest.mark.parametrize("text, where", [
    ("[grid]\nsizes = 8, 8, 1\n", "line 2: grid.sizes"),
    ("[flow]\nc_cfl = 0.1\n\nscheme = euler\n", "line 4: flow.scheme"),
    ("[solver]\ntol = abc\n", "line 2: solver.tol"),
    ("[bogus]\nx = 1\n", "line 1: bogus"),
    ("[flow]\nspeed = 3\n", "line 2: flow.speed"),
    ("[diagnostics]\nm_max = 5\n", "line 2: diagnostics.m_max"),
    ("[initial]\nfamily = sphere\n", "line 2: initial.family"),
    ("[projection]\nenabled = maybe\n", "line 2: projection.enabled"),
])
def test_errors_name_the_line(text, where):
    with pytest.raises(ConfigError) as err:
        RunConfig.from_text(text)
    assert str(err.value).startswith(where)


def test_default_driven_error_has_unknown_line():
    # diagonal is never written, so no line can be blamed
    with pytest.raises(ConfigError, match=r"^line \?: initial.diagonal"):
        RunConfig.from_text("[initial]\nfamily = constant_diagonal\n")


def test_syntax_error():
    with pytest.raises(ConfigError, match="syntax"):
        RunConfig.from_text("no section header\n")


def test_builders():
    cfg = RunConfig.from_text("[initial]\nfamily = conformally_flat\namplitude = 0.1\n"
                              "[flow]\nscheme = rk2\ndt = 1e-6\n[run]\nseed = 9\n")
    fam = cfg.make_family()
    assert fam.tag == "conformally_flat"
    pol = cfg.step_policy()
    assert pol.scheme == "rk2" and pol.dt == 1e-6 and pol.solver.probe_seed == 9


def test_shipped_configs_parse():
    texts = shipped_configs()
    assert "flat.ini" in texts
    for text in texts.values():
        RunConfig.from_text(text)
