ACCEPTANCE_RESULTS = []


def record_acceptance(number, name, passed, detail):
    ACCEPTANCE_RESULTS.append((number, name, passed, detail))
    assert passed, f"criterion {number} ({name}): {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {name}: "
                                    f"{status} ({detail})")
