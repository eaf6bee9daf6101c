import numpy as np
import pytest

from infkit.model import LabeledSet, ModelSpec

ACCEPTANCE_LINES: list[str] = []


def random_problem(seed: int, sizes=(4, 5, 3), activation="tanh", loss_kind="cross-entropy",
                   output_activation="identity", m: int = 12, l2: float = 0.0):
    """Random small MLP, parameters and labeled data."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec.mlp(list(sizes), activation=activation, output_activation=output_activation,
                         loss_kind=loss_kind, l2_weight=l2)
    params = spec.init_params(seed)
    params = params.with_values(params.values + 0.3 * rng.standard_normal(params.n))
    X = rng.standard_normal((m, sizes[0]))
    if loss_kind == "cross-entropy":
        y = rng.integers(0, sizes[-1], size=m)
    else:
        y = rng.standard_normal((m, sizes[-1]))
    return spec, params, LabeledSet(X, y)


@pytest.fixture
def small_problem():
    return random_problem(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
