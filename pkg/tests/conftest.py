import os

# single-threaded BLAS keeps float reductions bit-reproducible across runs
for _v in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_v, "1")
os.environ.setdefault("TAIL_DETERMINISTIC", "1")

import matplotlib  # noqa: E402

matplotlib.use("Agg")


def pytest_terminal_summary(terminalreporter):
    from _verdicts import VERDICTS

    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n][2])
