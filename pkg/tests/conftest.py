import os

from hypothesis import settings

settings.register_profile("repo", max_examples=25, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

_ACCEPTANCE: list[str] = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _ACCEPTANCE.extend(v for k, v in report.user_properties if k == "acceptance")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
