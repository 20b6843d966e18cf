import pytest

from markov_unlearn import config as C

TINY_OVERRIDES = [
    "data.n_retain=60", "data.n_forget1=30", "data.n_forget2=30",
    "model.layers=1", "model.heads=2", "model.d_model=16", "model.max_len=24",
    "pretrain.epochs=1", "pretrain.batch_size=32",
    "unlearn.iterations=4", "unlearn.diag_samples=16",
    "relearn.epochs=1", "relearn.batch_size=4", "relearn.eval_every_steps=1",
]


@pytest.fixture
def tiny_cfg(tmp_path):
    return C.parse_text("", TINY_OVERRIDES + [f"run.cache_dir={tmp_path / 'cache'}",
                                              f"run.out_dir={tmp_path / 'run'}"])


# acceptance summary -----------------------------------------------------------------

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion check")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if call.excinfo is None else "FAIL"
    _criteria[n] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, title, detail = _criteria[n]
        terminalreporter.write_line(f"{status}  criterion {n:>2}: {title}" + (f"  [{detail}]" if detail else ""))
