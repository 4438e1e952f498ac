import numpy as np
import pytest

from anticipation import tensor as tn
from anticipation.config import RunConfig
from anticipation.graphs import CandidateGraph, CandidateGraphSet
from anticipation.network import AnticipationModel, ModelDims


def numerical_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def check_grad(fn, *arrays, eps=1e-5, seed_grad=None):
    """Max relative error between backprop and central differences of ``sum(fn(*tensors) * w)``."""
    rng = np.random.default_rng(123)
    xs = [np.array(a, dtype=float) for a in arrays]
    ts = [tn.Tensor(x, requires_grad=True) for x in xs]
    out = fn(*ts)
    w = rng.standard_normal(out.shape) if seed_grad is None else seed_grad
    (out * w).sum().backward()

    def scalar():
        with tn.no_grad():
            return float(np.sum(fn(*[tn.Tensor(x) for x in xs]).data * w))

    return max(rel_err(t.grad, numerical_grad(scalar, x, eps)) for t, x in zip(ts, xs))


def toy_candidates(N=4, C=4):
    masks = [(True, True, False, False), (True, False, True, False),
             (True, True, True, False), (True, False, False, True),
             (False, True, True, True), (True, True, True, True)]
    graphs = [CandidateGraph(tuple(m[:N]), 10 - i) for i, m in enumerate(masks[:C])]
    return CandidateGraphSet(N, graphs)


def toy_dims(**kw):
    d = dict(n_nodes=4, n_events=3, C=4, k=2, l_p=2, l_t=2, policy_width=8, gcn_width=8,
             tcn_width=8, head_hidden=8, K_a=3, K_p=3, K_t=3, tau=1.0, n_sinkhorn=10)
    d.update(kw)
    return ModelDims(**d)


def toy_model(seed=0, **kw):
    dims = toy_dims(**kw)
    return AnticipationModel.init(dims, toy_candidates(dims.n_nodes, dims.C), seed=seed)


def random_boxes(rng, T, N, p_present=0.7):
    b = rng.uniform(0.05, 0.95, (T, N, 5))
    b[rng.random((T, N)) > p_present] = 0.0
    return b


def small_config(profile="instrument-phase", **kw):
    d = dict(N=8, C=6, k=2, l_p=3, l_t=3, policy_width=8, gcn_width=8, tcn_width=8, head_hidden=16,
             optimizer={"epochs": 2, "batch_size": 2})
    d.update(kw)
    return RunConfig.for_profile(profile, **d)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six short synthetic videos on disk."""
    from anticipation.synth import WorkflowTemplate, default_template, generate

    t = default_template().to_dict()
    for p in t["phases"]:
        p["median_minutes"] = 0.5
    root = tmp_path_factory.mktemp("small") / "data"
    generate(WorkflowTemplate.from_dict(t), 3, 6, root)
    return root


# acceptance report: one line per criterion, printed after the run

ACCEPTANCE = {}


def record_criterion(number, title, passed, detail):
    ACCEPTANCE[number] = (title, passed, detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] #{n} {title}: {detail}")
