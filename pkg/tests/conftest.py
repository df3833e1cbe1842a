"""Suite-level reporting: one pass/fail line per acceptance criterion."""

import re

CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = {}
    for status, label in (("passed", "PASS"), ("failed", "FAIL"),
                          ("error", "FAIL"), ("skipped", "SKIP")):
        for rep in terminalreporter.stats.get(status, []):
            match = CRITERION.search(getattr(rep, "nodeid", ""))
            if match is None:
                continue
            num = int(match.group(1))
            # a failed setup and a failed call both count as FAIL; never let
            # a later phase overwrite an earlier FAIL with PASS
            if rows.get(num, (None, "PASS"))[1] != "FAIL":
                rows[num] = (match.group(2).replace("_", " "), label)
    if not rows:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(rows):
        title, label = rows[num]
        terminalreporter.write_line(f"criterion {num:2d}: {label}  ({title})")
