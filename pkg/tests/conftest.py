import pytest

from rewindsim.channel import ChannelParams, channel_config


@pytest.fixture
def skylake_params():
    return ChannelParams(n_recv_divs=12, fu_preset="skylake_divsd", secret_bits="01", trials_per_bit=1000)


@pytest.fixture
def skylake_config(skylake_params):
    return channel_config(skylake_params)


_criteria: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and rep.passed:
        return
    n, title = mark.args
    ok = rep.passed and _criteria.get(n, (title, True))[1]
    _criteria[n] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok = _criteria[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}")
