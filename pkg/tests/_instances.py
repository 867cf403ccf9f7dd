"""Small double-precision instances for gradient checks, shared by several test files."""
import numpy as np

from objqa import aqa, numerics as nx, rqa

KINK_GAP = 1e-3


def rqa_instance(seed, C=8, M=2, N=3):
    """(param nodes, loss function) for one single-class group of N images."""
    rng = np.random.default_rng(seed)
    p = rqa.RqaParams.init(rng, C, M, value_noise=0.3)
    F = rng.normal(size=(C, N))
    head_w, head_b = rng.normal(size=(10, C)), rng.normal(size=(10, 1))
    label = int(rng.integers(10))
    nodes = [nx.param(a) for a in p.arrays()]

    def f(ps):
        T = rqa.template_graph(ps, F, M)
        return rqa.loss_graph(T, label, head_w, head_b, lambda_c=1.0)[0]

    return nodes, f


def _hinge_args(params, batch, hyper):
    """Every quantity whose sign flips a relu/abs/min/max branch in the total loss."""
    Q = aqa.absolute_scores(params, np.transpose(batch.feats, (2, 0, 1)).reshape(batch.feats.shape[2], -1))
    Q = Q.reshape(batch.q.shape)
    out = [(Q - params.th - hyper.eps).ravel()]
    for i, j in aqa.PAIRS:
        out.append(Q[:, i] - Q[:, j] - hyper.eps)
        out.append(Q[:, i] - Q[:, j] + hyper.eps)
        out.append(Q[:, i] - Q[:, j])
    d1, d2 = np.abs(Q[:, 0] - Q[:, 1]), np.abs(Q[:, 1] - Q[:, 2])
    out += [d1 - d2 - hyper.eps, d1 - d2 + hyper.eps, d1 - d2]
    e = aqa.entropy_values(Q)
    a = np.flatnonzero(batch.partner >= 0)
    gap = e[a] - e[batch.partner[a]]
    out += [gap - hyper.zeta, gap + hyper.zeta]
    return np.concatenate(out)


def aqa_instance(seed, C=8, hidden=6, B=4):
    """(param nodes, loss function) for the full absolute-quality loss.

    Inputs are redrawn until every hinge argument sits at least ``KINK_GAP``
    away from its kink, so central differences see a smooth function.
    """
    rng = np.random.default_rng(seed)
    hyper = aqa.AqaHyper()
    while True:
        params = aqa.AqaParams.init(rng, C, hidden)
        params.w2 = params.w2 * 4.0
        params.theta = rng.normal(0, 0.5, (1, 1))
        feats = rng.normal(size=(B, 3, C))
        q = rng.uniform(0.05, 0.95, (B, 3))
        delta = rng.choice([-1.0, 1.0], (B, 3))
        classes = np.arange(B) % 3
        batch = aqa.AqaBatch(feats, q, delta, classes, aqa.pair_partners(classes, rng))
        if np.min(np.abs(_hinge_args(params, batch, hyper))) > KINK_GAP:
            break
    # only the first five arrays train; the input standardization rides along as constants
    nodes = [nx.param(a) for a in params.arrays()[:5]]
    fixed = [nx.const(a) for a in params.arrays()[5:]]

    def f(ps):
        return aqa.total_graph(list(ps) + fixed, batch, hyper)[0]

    return nodes, f
