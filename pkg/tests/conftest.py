import re

CRITERIA = {
    1: "single-client collapse to centralized SGD",
    2: "EPSL(phi=0) reduces to PSL",
    3: "EPSL server load constant in M",
    4: "EPSL accuracy vs PSL and centralized",
    5: "SFL at cut L equals FedAvg",
    6: "hierarchical latency ordering",
    7: "allocator oracle and monotonicity",
    8: "routing DP equals exhaustive search",
    9: "layer gradient checks",
    10: "U-shaped labels never leave clients",
    11: "async PSL sanity",
    12: "compression identity and 8-bit",
}

_outcomes: dict = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d+)_", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.failed:
        _outcomes[n] = "FAIL"
    elif report.when == "call" and report.passed:
        _outcomes.setdefault(n, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        terminalreporter.write_line(f"C{n:<2} {_outcomes.get(n, 'NOT RUN'):<7} {name}")
