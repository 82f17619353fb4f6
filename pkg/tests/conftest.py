import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from multiloss import autodiff as ad  # noqa: E402
from multiloss.data import gen_gaussian_blobs  # noqa: E402
from oracles import finite_diff_grad, rel_err  # noqa: E402


def check_grad(fn, *inputs, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors to a scalar Tensor; each input is checked in turn.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    ts = [ad.Tensor(a, requires_grad=True) for a in arrays]
    fn(*ts).backward()
    worst = 0.0
    for k, t in enumerate(ts):
        def f(xk, k=k):
            args = [ad.Tensor(xk if i == k else arrays[i]) for i in range(len(arrays))]
            return fn(*args).item()

        numeric = finite_diff_grad(f, arrays[k], h)
        analytic = t.grad if t.grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, rel_err(analytic, numeric))
    return worst


@pytest.fixture(scope="session")
def blobs():
    return gen_gaussian_blobs(num_classes=3, n_per_class=100, spread=0.5, label_noise_frac=0.1, seed=0)


ACCEPTANCE_LINES = {}


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
