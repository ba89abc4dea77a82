import numpy as np
import pytest

from protoseg import numerics as nx


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (all entries)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-12) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def tape_grad(build, *arrays):
    """Gradients of ``sum(build(*tensors) * w)`` for a fixed random weighting ``w``.

    Returns ``(analytic grads, scalar function of the i-th array)``.
    """
    rng = np.random.default_rng(1234)
    tape = nx.Tape()
    ts = [tape.parameter(a, f"x{i}") for i, a in enumerate(arrays)]
    out = build(*ts)
    w = rng.normal(size=out.shape)
    loss = nx.sum_all(nx.mul(out, w))
    grads = nx.backward(tape, loss)

    def scalar(i):
        def f(xi):
            args = list(arrays)
            args[i] = xi
            return float(np.sum(build(*[nx.Tensor(a) for a in args]).data * w))
        return f

    return [grads[f"x{i}"] for i in range(len(arrays))], scalar


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_episode(seed: int, m: int = 32, n_way: int = 2, k_shot: int = 1):
    """Frozen random episode: ``m`` points per cloud, every class present."""
    from protoseg.episodes import Episode
    from protoseg.pointcloud import PointCloud

    rng = np.random.default_rng(seed)

    def cloud(labels):
        return PointCloud(rng.normal(size=(m, 3)), rng.uniform(size=(m, 3)), labels)

    support, classes = [], []
    for c in range(1, n_way + 1):
        for _ in range(k_shot):
            mask = np.zeros(m, bool)
            mask[rng.choice(m, m // 3, replace=False)] = True
            support.append((cloud(mask.astype(int) * c), mask))
            classes.append(c)
    q = np.arange(m) % (n_way + 1)
    rng.shuffle(q)
    return Episode(support, classes, [(cloud(q), q)], tuple(range(10, 10 + n_way)))


TINY_EMBED = dict(knn_k=4, edgeconv1=[5, 4], edgeconv2=[6, 5], d_sem=6, metric=[5, 4])


# -- acceptance reporting -------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``record(cid, title, passed, detail)``: log one pass/fail line, then assert."""
    def record(cid: str, title: str, passed: bool, detail: str = "") -> None:
        line = f"{'PASS' if passed else 'FAIL'}  {cid}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
