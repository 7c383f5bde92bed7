import textwrap

import numpy as np
import pytest

from dissipative_smp.config import load_config, parse_config
from dissipative_smp.controls import LinearFeedback
from dissipative_smp.errors import ConfigParseError
from dissipative_smp.models import riccati_gain

from conftest import P_STAR

BASE = textwrap.dedent("""\
    [model]
    name = "lq_scalar"
    params = { a = -1.0, sigma0 = 0.5 }

    [grid]
    h = 0.01
    r = 0.5
    T = 4.0
    tail_tolerance = 0.2
    """)


def parse_error(text):
    with pytest.raises(ConfigParseError) as info:
        parse_config(text)
    return info.value


class TestParse:
    def test_defaults(self):
        cfg = parse_config(BASE)
        assert cfg.run.paths == 10000 and cfg.run.seed == 0 and cfg.run.workers == 1
        assert cfg.control.kind == "constant"
        assert cfg.spike.eps == sorted(cfg.spike.eps, reverse=True)
        assert cfg.text == BASE

    def test_grid(self):
        cfg = parse_config(BASE)
        model = cfg.build_model()
        grid = cfg.build_grid(model)
        assert grid.horizon_T == 4.0 and grid.step_h == 0.01 and grid.discount_r == 0.5

    def test_grid_from_tail(self):
        cfg = parse_config(BASE.replace("T = 4.0\n", "").replace("0.2", "0.01"))
        grid = cfg.build_grid(cfg.build_model())
        assert np.exp(-0.5 * grid.horizon_T) <= 0.01 + 1e-12

    def test_riccati_control(self):
        cfg = parse_config(BASE + '\n[control]\nkind = "riccati"\n')
        law = cfg.build_control(cfg.build_model())
        assert isinstance(law, LinearFeedback)
        assert -law.gain[0, 0] == pytest.approx(P_STAR, abs=1e-12)
        assert P_STAR == pytest.approx(riccati_gain(-1.0, 0.5))

    def test_explicit_controls(self):
        cfg = parse_config(BASE + "\n[smp]\ncontrols = [[-1.0], [0.0], [1.0]]\n")
        assert cfg.smp_points(cfg.build_model()).shape == (3, 1)

    def test_interval_controls(self):
        cfg = parse_config(BASE + "\n[smp]\ncontrol_low = -1.0\ncontrol_high = 1.0\ncontrol_points = 5\n")
        assert np.allclose(cfg.smp_points(cfg.build_model())[:, 0], [-1, -0.5, 0, 0.5, 1])

    def test_auto_discount(self):
        cfg = parse_config(BASE.replace("r = 0.5", 'r = "auto"'))
        model = cfg.build_model()
        r = cfg.resolve_discount(model)
        assert r > 0
        assert cfg.to_dict()["grid"]["r_resolved"] == r
        assert cfg.to_dict()["grid"]["r"] == "auto"

    def test_load(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text(BASE)
        assert load_config(p).model.name == "lq_scalar"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigParseError):
            load_config(tmp_path / "none.toml")


class TestErrors:
    def test_unknown_key(self):
        err = parse_error(BASE + "\n[run]\npaths = 10\nwokers = 2\n")
        assert err.field == "run.wokers" and err.line == 13

    def test_unknown_section(self):
        err = parse_error(BASE + "\n[runs]\npaths = 10\n")
        assert err.field == "runs" and err.line == 11

    def test_bad_type(self):
        err = parse_error(BASE + '\n[run]\npaths = "many"\n')
        assert err.field == "run.paths" and err.line == 12

    def test_negative_step(self):
        err = parse_error(BASE.replace("h = 0.01", "h = -0.01"))
        assert err.field == "grid.h" and err.line == 6

    def test_invalid_toml(self):
        err = parse_error(BASE + "\n[run\n")
        assert err.line == 11

    def test_missing_model_name(self):
        err = parse_error(BASE.replace('name = "lq_scalar"\n', ""))
        assert err.field == "model.name"

    def test_missing_step(self):
        err = parse_error(BASE.replace("h = 0.01\n", ""))
        assert err.field == "grid.h"

    def test_eps_ladder_order(self):
        err = parse_error(BASE + "\n[spike]\neps = [0.1, 0.2]\n")
        assert err.field == "spike.eps" and err.line == 12

    def test_unknown_model(self):
        cfg = parse_config(BASE.replace("lq_scalar", "lq_vector"))
        with pytest.raises(ConfigParseError) as info:
            cfg.build_model()
        assert info.value.field == "model.name" and info.value.line == 2

    def test_riccati_needs_lq(self):
        cfg = parse_config(BASE.replace("lq_scalar", "logistic").replace("a = -1.0, sigma0 = 0.5", "")
                           + '\n[control]\nkind = "riccati"\n')
        with pytest.raises(ConfigParseError) as info:
            cfg.build_control(cfg.build_model())
        assert info.value.field == "control.kind"

    def test_message_has_location(self):
        err = parse_error(BASE + "\n[run]\nwokers = 2\n")
        assert "line 12" in str(err) and "run.wokers" in str(err)
