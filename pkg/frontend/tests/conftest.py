from contextlib import contextmanager

import pytest


@pytest.fixture
def checklist(capsys):
    """Context manager printing one PASS/FAIL line per release criterion,
    bypassing output capture so the run log shows the checklist."""

    @contextmanager
    def criterion(name):
        try:
            yield
        except BaseException:
            with capsys.disabled():
                print(f"FAIL: {name}")
            raise
        with capsys.disabled():
            print(f"PASS: {name}")

    return criterion
