import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ubsmoe.config import dumps, from_dict, override, parse_config
from ubsmoe.numerics import ConfigError


def test_empty_object_gives_defaults():
    cfg = parse_config("{}")
    assert cfg.n_p == 2 and cfg.zeta == 0.9 and cfg.phi_range == [-1.0, 1.0]
    assert cfg.pg.clip == 2.0 and cfg.k_max == 8 and cfg.dirichlet_alpha == 0.1


def test_file_source(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 7, "lambda": 0.5}))
    cfg = parse_config(path)
    assert cfg.seed == 7 and cfg.lam == 0.5


@pytest.mark.parametrize(
    "bad,field",
    [
        ({"bogus": 1}, "bogus"),
        ({"dims": {"width": 3}}, "width"),
        ({"lam": 0.1}, "lam"),
        ({"budgets": [0.5]}, "n_p"),  # k_c = 4 > n_p = 2
        ({"n_p": 20}, "n_p"),
        ({"dims": {"l": 6}}, "dims.l"),
        ({"eta": 0}, "eta"),
        ({"zeta": 1.5}, "zeta"),
        ({"phi_range": [1, -1]}, "phi_range"),
        ({"dmr": {"phi_upload": "maybe"}}, "phi_upload"),
        ({"budgets": [0.0]}, "beta"),
        ({"task": {"kind": "images"}}, "task.kind"),
    ],
)
def test_rejections_name_the_field(bad, field):
    with pytest.raises(ConfigError, match=field):
        from_dict(bad)


def test_missing_file():
    with pytest.raises(ConfigError):
        parse_config("/nonexistent/config.json")


def test_malformed_json():
    with pytest.raises(ConfigError):
        parse_config("{not json")


def test_override_nested_and_unknown():
    cfg = override(parse_config("{}"), ["dims.experts=16", "seed=3", "dmr.enabled=false"])
    assert cfg.dims.experts == 16 and cfg.seed == 3 and cfg.dmr.enabled is False
    with pytest.raises(ConfigError):
        override(cfg, ["dims.nothing=1"])
    with pytest.raises(ConfigError):
        override(cfg, ["n_p=1"])


@settings(max_examples=50)
@given(
    st.fixed_dictionaries(
        {},
        optional={
            "seed": st.integers(0, 10**6),
            "rounds": st.integers(0, 50),
            "eta": st.floats(1e-4, 1.0),
            "zeta": st.floats(0.0, 1.0),
            "lambda": st.floats(0.0, 1.0),
            "dims": st.fixed_dictionaries({}, optional={"experts": st.integers(8, 32), "rank": st.integers(1, 8)}),
            "pg": st.fixed_dictionaries({}, optional={"enabled": st.booleans(), "clip": st.floats(0.1, 10.0)}),
        },
    )
)
def test_round_trip(data):
    cfg = from_dict(data)
    text = dumps(cfg)
    again = from_dict(json.loads(text))
    assert dumps(again) == text
    for key, value in data.items():
        if not isinstance(value, dict):
            assert json.loads(text)[key] == value
