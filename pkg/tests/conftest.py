def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        status, text = RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {text}")
