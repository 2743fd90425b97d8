import pytest

# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record_criterion():
    def record(n, ok, detail):
        ok = bool(ok)
        # several tests may feed one criterion; it passes only if all of them do
        prev_ok, prev_detail = ACCEPTANCE.get(n, (True, ""))
        joined = f"{prev_detail}; {detail}" if prev_detail else detail
        ACCEPTANCE[n] = (prev_ok and ok, joined)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record
