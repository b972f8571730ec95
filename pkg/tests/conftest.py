import sys


def pytest_terminal_summary(terminalreporter):
    lines = []
    for name, module in list(sys.modules.items()):
        if name.endswith("test_acceptance"):
            lines = [module.LINES[k] for k in sorted(module.LINES)]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
