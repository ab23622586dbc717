import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.TITLES):
        if n in mod.RESULTS:
            ok, detail = mod.RESULTS[n]
            terminalreporter.write_line(f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {mod.TITLES[n]}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d} [FAIL] {mod.TITLES[n]}: not run to completion")
