import os

# one worker everywhere: timings in the acceptance suite assume it
os.environ.setdefault("OMP_NUM_THREADS", "1")

import torch  # noqa: E402

torch.set_num_threads(1)

AC_LINES = {}


def record(name: str, ok: bool, detail: str) -> None:
    """Remember one acceptance verdict; printed in the terminal summary."""
    line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
    AC_LINES[name] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if AC_LINES:
        terminalreporter.section("acceptance criteria")
        for name in sorted(AC_LINES):
            terminalreporter.write_line(AC_LINES[name])
