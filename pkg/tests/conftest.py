import numpy as np
import pytest

from mintkit import tensor as T
from mintkit.model import MiniModelConfig, build_model
from mintkit.synthdocs.batching import collate
from mintkit.synthdocs.generate import DatasetSpec, gen_dataset

SMALL = MiniModelConfig(d_model=16, n_layers=2, n_heads=4, d_ff=32, grid_rows=6, grid_cols=8, max_prompt=32)
SMALL_SPEC = DatasetSpec(n_docs=24, grid_rows=6, grid_cols=8, n_keys=4, n_values=4, pairs_min=2, pairs_max=3)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check_op(build, *arrays, tol: float = 1e-4) -> float:
    """Gradient of ``sum(out * probe)`` for each input; returns the worst relative error."""
    rng = np.random.default_rng(len(arrays))
    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    probe = rng.standard_normal(out.shape)

    def scalar():
        with T.no_grad():
            return float((build(*[T.Tensor(leaf.data) for leaf in leaves]).data * probe).sum())

    loss = T.ops.sum(T.mul(out, T.Tensor(probe)))
    T.backward(loss)
    worst = 0.0
    for leaf in leaves:
        num = numeric_grad(scalar, leaf.data)
        worst = max(worst, rel_error(leaf.grad, num))
    assert worst <= tol, worst
    return worst


@pytest.fixture(scope="session")
def small_model():
    return build_model(SMALL, 3)


@pytest.fixture(scope="session")
def small_data():
    return gen_dataset(SMALL_SPEC, 5)


@pytest.fixture(scope="session")
def small_batch(small_data):
    return collate(small_data[:6])


# criterion id -> (passed, detail); filled by test_acceptance, printed once at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def acceptance_line(key: str) -> str:
    ok, detail = ACCEPTANCE[key]
    label = f"criterion {key}" if key.isdigit() else f"check {key}"
    return f"{label}: {'PASS' if ok else 'FAIL'}  {detail}"


def _order(key: str):
    return (0, int(key), "") if key.isdigit() else (1, 0, key)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for key in sorted(ACCEPTANCE, key=_order):
            terminalreporter.write_line(acceptance_line(key))
