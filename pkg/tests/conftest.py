import numpy as np
import pytest

from asars.autodiff import precision
from asars.dataprep import Corpus, DwellBinning, Session


@pytest.fixture
def f64():
    with precision("float64"):
        yield


def random_sessions(rng, n_sessions, num_items, num_users, max_len=8, num_bins=4, t0=0):
    """Remapped sessions with random items, dwell and bins."""
    out = []
    t = t0
    for _ in range(n_sessions):
        L = int(rng.integers(2, max_len + 1))
        items = rng.integers(num_items, size=L).tolist()
        gaps = rng.integers(1, 600, size=L - 1)
        ts = [t] + (t + np.cumsum(gaps)).tolist()
        t = ts[-1] + 7200
        out.append(
            Session(
                int(rng.integers(num_users)),
                items,
                [int(x) for x in ts],
                gaps.astype(float).tolist(),
                rng.integers(num_bins, size=L - 1).tolist(),
            )
        )
    return out


def make_corpus(sessions, num_items, num_users, num_bins=4):
    pop = np.zeros(num_items, dtype=np.int64)
    for s in sessions:
        np.add.at(pop, s.items, 1)
    return Corpus(
        list(sessions),
        [str(i) for i in range(num_items)],
        [str(u) for u in range(num_users)],
        pop,
        DwellBinning(150.0, num_bins),
    )


def toy_model(variant, seed=0, V=20, U=5, d=8, n=6, n_sessions=2, scale=0.5, T=4):
    """float64 model with random parameters (biases included) plus toy sessions.

    Must be called inside a float64 precision block.
    """
    from asars.model import ASARSModel, ModelConfig

    cfg = ModelConfig(
        variant=variant,
        num_items=V,
        num_users=U,
        num_time_bins=T,
        item_embed_dim=d,
        time_embed_dim=d,
        user_embed_dim=d,
        hidden_dim=d,
        dropout=0.0,
        item_time_full_table=True,
        global_bias=True,
        user_bias=True,
        user_dev=True,
    )
    rng = np.random.default_rng(seed)
    m = ASARSModel(cfg, seed=seed, user_mean_day=rng.uniform(0, 3, size=U))
    for p in m.params.values():
        p.data[...] = rng.normal(scale=scale, size=p.data.shape)
    sessions = []
    for k in range(n_sessions):
        L = n + 1 if k == 0 else max(2, n - 2)
        ts = np.cumsum(rng.integers(1, 3 * 86400, size=L)).tolist()
        sessions.append(Session(int(rng.integers(U)), rng.integers(V, size=L).tolist(), ts, [1.0] * (L - 1), rng.integers(T, size=L - 1).tolist()))
    return m, sessions


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record_acceptance(num: int, passed: bool, detail: str) -> None:
    line = f"criterion {num:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[num] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for num in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[num])
