import numpy as np
import pytest

from floodplan.data import chronological_split, fit_normalizer, make_windows
from floodplan.models import ColumnRoles, EvaluatorModel, GtnConfig, ManagerModel, MlpConfig, TcnConfig
from floodplan.sim import default_topology, generate_dataset

TINY_CONFIGS = {
    "mlp": MlpConfig(hidden=(8, 6)),
    "tcn": TcnConfig(dilations=(1, 2), filters=4, head_hidden=4),
    "gtn": GtnConfig(graph_channels=(4, 3), recurrent_units=3, conv_filters=4, d_model=3, head_hidden=4),
}


class Bundle:
    """A small normalised dataset plus the pieces needed to build models on it."""

    def __init__(self, seed: int, hours: int, w: int, k: int):
        self.topology = default_topology()
        self.frame = generate_dataset(seed, hours, w=w, k=k)
        self.w, self.k = w, k
        windows = make_windows(self.frame, w, k)
        train, test = chronological_split(windows, 0.8, purge=k)
        self.normalizer = fit_normalizer(self.frame, train)
        values = self.normalizer.normalize(self.frame.values)
        self.train = train.with_values(values)
        self.test = test.with_values(values)
        self.roles = ColumnRoles.from_frame(self.frame)

    def manager_windows(self, ws):
        return ws.as_mode("manager", self.frame)

    def evaluator(self, arch="gtn", config=None, seed=0):
        return EvaluatorModel(arch, self.roles, self.normalizer, self.w, self.k, config,
                              self.topology.adjacency, seed=seed)

    def manager(self, arch="gtn", config=None, seed=1):
        return ManagerModel(arch, self.roles, self.normalizer, self.w, self.k, config,
                            self.topology.adjacency, seed=seed)


@pytest.fixture(scope="session")
def default_bundle():
    return Bundle(5, 400, 72, 24)


@pytest.fixture(scope="session")
def tiny_bundle():
    return Bundle(6, 400, 6, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

_criteria: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    entry = _criteria.setdefault(report.nodeid, [props["criterion"], props["title"], "PASS", ""])
    if report.failed:
        entry[2] = "FAIL"
    elif report.skipped and report.when != "teardown":
        entry[2] = "SKIP"
    if "measured" in props:
        entry[3] = props["measured"]


@pytest.fixture(autouse=True)
def _criterion_properties(request):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        number, title = marker.args
        request.node.user_properties += [("criterion", number), ("title", title)]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (number, title, status, measured) in sorted(_criteria.items(), key=lambda kv: (kv[1][0], kv[0])):
        detail = f" ({measured})" if measured else ""
        terminalreporter.write_line(f"{status} criterion {number:>2}: {title}{detail}")
