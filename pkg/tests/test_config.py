import json

import numpy as np
import pytest

from clq.config import EXAMPLES, example_path, parse_config, parse_object
from clq.errors import ParseError, ValidationError
from clq.finite_horizon import ProblemData
from clq.infinite_horizon import StationaryProblem
from clq.meanvar import MvProblem


def example(name):
    return json.loads(example_path(name).read_text())


def test_every_example_parses():
    kinds = {"example1_finite": ProblemData, "example1_stationary": StationaryProblem,
             "example1_nosolution": StationaryProblem, "example2_mv": MvProblem}
    assert set(kinds) == set(EXAMPLES)
    for name, cls in kinds.items():
        assert isinstance(parse_config(example_path(name)), cls)
    with pytest.raises(KeyError):
        example_path("example3")


def test_example1_coefficients(ex1_finite):
    assert ex1_finite.horizon == 0.1 and ex1_finite.q_T == 0.0
    assert np.array_equal(ex1_finite.B[0], [-5, -10, 20])
    assert np.array_equal(ex1_finite.D[0][2], [0.68, 14.53, -2.32])
    assert np.array_equal(ex1_finite.R[0], np.diag([3.0, 5.0, 4.0]))
    assert ex1_finite.q[0] == 10.0
    # bounds shorthand: u <= 0.5|x| and -u <= 0.2|x|
    assert np.array_equal(ex1_finite.H[0], np.vstack([np.eye(3), -np.eye(3)]))
    assert np.array_equal(ex1_finite.d[0], [0.5] * 3 + [0.2] * 3)


def test_grid_override():
    data = parse_config(example_path("example1_finite"), steps=50)
    assert data.grid.size == 51 and data.grid[-1] == 0.1
    obj = example("example1_finite")
    obj["grid"] = {"points": [0.0, 0.05, 0.1]}
    assert np.array_equal(parse_object(obj).grid, [0.0, 0.05, 0.1])


def test_time_varying_coefficients():
    obj = example("example1_finite")
    obj["knots"] = [0.0, 0.1]
    obj["A"] = [0.2, 0.4]
    data = parse_object(obj)
    assert data.at(0.05).A == pytest.approx(0.3)


def test_negative_state_cost_names_psd_assumption():
    obj = example("example1_finite")
    obj["q"] = -1
    with pytest.raises(ValidationError) as exc:
        parse_object(obj)
    assert exc.value.assumption == "Assumption 2"


def test_contradictory_bounds_name_feasibility_assumption():
    obj = example("example1_finite")
    obj["constraints"] = {"lower": [0.6, -0.2, -0.2], "upper": [0.5, 0.5, 0.5]}
    with pytest.raises(ValidationError) as exc:
        parse_object(obj)
    assert exc.value.assumption == "Assumption 1"


def test_malformed_json_reports_position(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "kind": "finite",\n  "A": 0.2,,\n}')
    with pytest.raises(ParseError) as exc:
        parse_config(bad)
    assert exc.value.line == 3 and exc.value.column > 1


@pytest.mark.parametrize("mutate", [
    lambda o: o.pop("A"),
    lambda o: o.update(schema_version=2),
    lambda o: o.update(kind="quadratic"),
    lambda o: o.update(extra=1),
    lambda o: o.update(B="fast"),
    lambda o: o.update(D=[[1.0, 2.0]]),
])
def test_schema_violations(mutate):
    obj = example("example1_finite")
    mutate(obj)
    with pytest.raises(ValidationError) as exc:
        parse_object(obj)
    assert exc.value.assumption == "schema"


@pytest.mark.parametrize("assets", [[7], [0]])
def test_no_short_assets_out_of_range(assets):
    obj = example("example2_mv")
    obj["no_short_assets"] = assets
    with pytest.raises(ValidationError):
        parse_object(obj)


def test_meanvar_market_errors_become_validation_errors():
    obj = example("example2_mv")
    obj["mu"] = [obj["r"]] * 6
    with pytest.raises(ValidationError) as exc:
        parse_object(obj)
    assert exc.value.assumption == "Assumption 5"
    assert isinstance(parse_object(obj, validate=False), MvProblem)


def test_cone_and_no_short_are_exclusive():
    obj = example("example2_mv")
    obj["cone"] = {"H": np.eye(6).tolist()}
    with pytest.raises(ValidationError):
        parse_object(obj)
    del obj["no_short_assets"]
    assert parse_object(obj).H.shape == (2, 6, 6)
