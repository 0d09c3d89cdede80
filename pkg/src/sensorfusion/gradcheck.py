"""Finite-difference checks of every op and of fully assembled graphs, plus the
gradient identities that distinguish BFM from BFM_SC.

Relative error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
over one parameter tensor.  Central differences that straddle a kink (a relu
mask, max-pool argmax or BCE clamp that differs between the two probes) are
retried with a 100x smaller step and skipped if the kink persists.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .netgraph import ArchParams, Topology, TopologyKind, assemble
from .trainer import bfm_sc_loss

FD_STEP = 1e-6
OP_TOL = 1e-5

TINY_ARCH = ArchParams(nf1=3, nf2=3, nf3=4, nf4=4, cnn_hidden=3, lstm_units=3, lstm_dense1=3, lstm_dense2=3)


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    tol: float
    skipped: int = 0
    detail: dict = field(default_factory=dict)
    metric: str = "max_rel_err"

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tol)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" skipped={self.skipped}" if self.skipped else ""
        return f"{status} {self.name:<28} seed={self.seed:<3} {self.metric}={self.max_rel_error:.3e} tol={self.tol:.0e}{extra}"


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a)) if a.size else 0.0, np.max(np.abs(n)) if n.size else 0.0)
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)


def _probe(f):
    with ad.record_branches() as rec:
        value = f()
    return value, rec


def numerical_grad(f, array, step=FD_STEP, entries=None):
    """Central differences of scalar ``f()`` w.r.t. ``array`` (perturbed in place).

    Returns ``(grad, valid)`` where ``valid`` marks entries not sitting on a kink.
    """
    grad = np.zeros_like(array)
    valid = np.zeros(array.shape, dtype=bool)
    flat = array.reshape(-1)
    positions = range(flat.size) if entries is None else entries
    for i in positions:
        orig = flat[i]
        for h in (step, step * 1e-2):
            flat[i] = orig + h
            fp, rp = _probe(f)
            flat[i] = orig - h
            fm, rm = _probe(f)
            flat[i] = orig
            if rp == rm:
                grad.reshape(-1)[i] = (fp - fm) / (2 * h)
                valid.reshape(-1)[i] = True
                break
    return grad, valid


def _compare(name, seed, analytic, numeric, valid, selected, tol):
    err = rel_error(np.asarray(analytic)[valid], np.asarray(numeric)[valid])
    return CheckResult(name, seed, err, tol, skipped=int(selected.sum() - valid.sum()))


def _merge(name, seed, results, tol):
    worst = max((r.max_rel_error for r in results), default=0.0)
    return CheckResult(name, seed, worst, tol, skipped=sum(r.skipped for r in results),
                       detail={r.name: r.max_rel_error for r in results})


def check_function(name, seed, build, tensors, tol=OP_TOL, entries=None):
    """Compare backward of scalar ``build()`` with finite differences for each tensor."""
    for t in tensors:
        t.grad = None
    out = build()
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    results = []
    for k, (t, a) in enumerate(zip(tensors, analytic)):
        with ad.no_grad():
            num, valid = numerical_grad(lambda: build().item(), t.data,
                                        entries=None if entries is None else entries.get(k))
        selected = np.ones(t.shape, dtype=bool)
        if entries is not None and k in entries:
            selected[:] = False
            selected.reshape(-1)[list(entries[k])] = True
            valid = valid & selected
        results.append(_compare(t.name or f"arg{k}", seed, a, num, valid, selected, tol))
    return _merge(name, seed, results, tol)


# --------------------------------------------------------------------------
# per-op checks


def _randn(rng, *shape, name=None, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True, name=name)


def _weighted_sum(out, rng):
    # random projection so that every output element matters
    w = rng.standard_normal(out.shape)
    return ad.tsum(ad.mul(out, w))


def check_conv1d(seed=0, tol=1e-6):
    rng = np.random.default_rng(seed)
    x = _randn(rng, 12, 2, name="input")
    w = _randn(rng, 4, 2, 3, name="kernels")
    b = _randn(rng, 3, name="bias")
    return check_function("conv1d", seed, lambda: ad.tsum(ad.conv1d(x, w, b)), [x, w, b], tol)


def check_conv1d_batched(seed=0, tol=1e-6):
    rng = np.random.default_rng(seed)
    x = _randn(rng, 3, 12, 2, name="input")
    w = _randn(rng, 4, 2, 3, name="kernels")
    b = _randn(rng, 3, name="bias")
    proj = rng.standard_normal((3, 9, 3))
    return check_function("conv1d[batched]", seed, lambda: ad.tsum(ad.mul(ad.conv1d(x, w, b), proj)), [x, w, b], tol)


def check_maxpool1d(seed=0, tol=OP_TOL):
    rng = np.random.default_rng(seed)
    x = _randn(rng, 2, 11, 3, name="input")
    proj = rng.standard_normal((2, 3, 3))
    return check_function("maxpool1d", seed, lambda: ad.tsum(ad.mul(ad.maxpool1d(x, 3), proj)), [x], tol)


def check_gap(seed=0, tol=1e-8):
    rng = np.random.default_rng(seed)
    x = _randn(rng, 9, 4, name="input")
    proj = rng.standard_normal(4)
    return check_function("global_avg_pool", seed, lambda: ad.tsum(ad.mul(ad.global_avg_pool(x), proj)), [x], tol)


def check_dense(seed=0, tol=1e-6, activation="tanh"):
    rng = np.random.default_rng(seed)
    x = _randn(rng, 6, name="input")
    w = _randn(rng, 6, 3, name="weights", scale=0.5)
    b = _randn(rng, 3, name="bias")
    proj = rng.standard_normal(3)
    return check_function(f"dense[{activation}]", seed,
                          lambda: ad.tsum(ad.mul(ad.dense(x, w, b, activation), proj)), [x, w, b], tol)


def check_lstm(seed=0, tol=OP_TOL):
    rng = np.random.default_rng(seed)
    x = _randn(rng, 8, 2, name="input")
    wx = _randn(rng, 2, 12, name="Wx", scale=0.5)
    wh = _randn(rng, 3, 12, name="Wh", scale=0.5)
    b = _randn(rng, 12, name="b", scale=0.5)
    proj = rng.standard_normal(3)
    return check_function("lstm_sequence", seed,
                          lambda: ad.tsum(ad.mul(ad.lstm_sequence(x, wx, wh, b), proj)), [x, wx, wh, b], tol)


def check_dropout(seed=0, tol=OP_TOL):
    rng = np.random.default_rng(seed)
    x = _randn(rng, 4, 5, name="input")
    proj = rng.standard_normal((4, 5))
    build = lambda: ad.tsum(ad.mul(ad.dropout(x, 0.3, True, np.random.default_rng(seed + 1)), proj))
    return check_function("dropout", seed, build, [x], tol)


def check_concat(seed=0, tol=OP_TOL):
    rng = np.random.default_rng(seed)
    a = _randn(rng, 2, 3, name="a")
    b = _randn(rng, 2, 1, name="b")
    proj = rng.standard_normal((2, 4))
    return check_function("concat", seed, lambda: ad.tsum(ad.mul(ad.concat([a, b]), proj)), [a, b], tol)


def check_bce(seed=0, tol=OP_TOL):
    rng = np.random.default_rng(seed)
    z = _randn(rng, 6, name="logits")
    t = rng.integers(0, 2, 6)
    return check_function("bce", seed, lambda: ad.bce_loss(ad.sigmoid(z), t), [z], tol)


OP_CHECKS = {
    "conv1d": check_conv1d,
    "conv1d_batched": check_conv1d_batched,
    "maxpool1d": check_maxpool1d,
    "gap": check_gap,
    "dense": lambda seed=0: _merge("dense", seed, [check_dense(seed, activation=a)
                                                   for a in ("relu", "sigmoid", "tanh", "linear")], 1e-6),
    "lstm": check_lstm,
    "dropout": check_dropout,
    "concat": check_concat,
    "bce": check_bce,
}


# --------------------------------------------------------------------------
# whole-graph checks


def _graph_loss(model, x, y, dropout_seed):
    out = model.forward(x, train=True, rng=np.random.default_rng(dropout_seed))
    if model.topology.kind is TopologyKind.BFM_SC:
        return bfm_sc_loss(out.fusion, out.shortcuts, y)
    return ad.bce_loss(out.fusion, y)


def check_model(kind, topology, seed=0, arch=TINY_ARCH, channels=("abdores", "thorres"),
                batch=2, tol=OP_TOL, max_entries=None):
    """Every parameter of an assembled graph against finite differences.

    ``max_entries`` limits the check to a random subset of entries per tensor.
    """
    topo = topology if isinstance(topology, Topology) else (
        Topology(TopologyKind.SIM, channels[:1]) if topology in ("SIM", TopologyKind.SIM)
        else Topology(topology, channels))
    model = assemble(topo, kind, arch, seed)
    rng = np.random.default_rng(seed + 1000)
    x = rng.standard_normal((batch, arch.window, len(topo.channels)))
    y = np.arange(batch) % 2
    tensors = list(model.params.values())
    entries = None
    if max_entries is not None:
        entries = {k: sorted(rng.choice(t.size, min(t.size, max_entries), replace=False))
                   for k, t in enumerate(tensors)}
    return check_function(f"{kind}-{topo.config_id}", seed,
                          lambda: _graph_loss(model, x, y, seed + 7), tensors, tol, entries)


# --------------------------------------------------------------------------
# BFM / BFM_SC gradient identities


def _branch_grads(model, x, loss_fn):
    model.params.zero_grad()
    out = model.forward(x)
    loss_fn(out).backward()
    names = [n for b in model.branches for n in b.param_names()]
    # parameters outside the loss's path keep grad None
    return {n: (np.zeros_like(model.params[n].data) if model.params[n].grad is None
                else model.params[n].grad.copy()) for n in names}, out


def shortcut_identity(kind, seed, arch=TINY_ARCH, channels=("abdores", "thorres"), batch=3):
    """Max |g_total - (g_fusion / 2 + g_own_shortcut / 2)| over all branch parameters."""
    model = assemble(Topology(TopologyKind.BFM_SC, channels), kind, arch, seed)
    rng = np.random.default_rng(seed + 2000)
    x = rng.standard_normal((batch, arch.window, len(channels)))
    y = rng.integers(0, 2, batch)
    total, _ = _branch_grads(model, x, lambda o: bfm_sc_loss(o.fusion, o.shortcuts, y))
    fusion_only, _ = _branch_grads(model, x, lambda o: ad.bce_loss(o.fusion, y))
    worst = 0.0
    for i, branch in enumerate(model.branches):
        own, _ = _branch_grads(model, x, lambda o, i=i: ad.bce_loss(o.shortcuts[i], y))
        for name in branch.param_names():
            expected = 0.5 * fusion_only[name] + 0.5 * own[name]
            worst = max(worst, float(np.max(np.abs(total[name] - expected))))
    return worst


def starvation(kind, seed, arch=TINY_ARCH, channels=("abdores", "thorres"), batch=3):
    """Gradients reaching the branches when the fusion output error is exactly zero.

    The fusion target is set to the fusion output itself.  Returns
    ``(bfm_max_abs_grad, bfm_sc_max_abs_grad, bfm_sc_max_dev_from_half_shortcut)``.
    """
    rng = np.random.default_rng(seed + 3000)
    x = rng.standard_normal((batch, arch.window, len(channels)))
    y = rng.integers(0, 2, batch)

    bfm = assemble(Topology(TopologyKind.BFM, channels), kind, arch, seed)
    fusion_p = bfm.predict(x)
    g_bfm, _ = _branch_grads(bfm, x, lambda o: ad.bce_loss(o.fusion, fusion_p, soft=True))
    bfm_max = max(float(np.max(np.abs(g))) for g in g_bfm.values())

    sc = assemble(Topology(TopologyKind.BFM_SC, channels), kind, arch, seed)
    g_sc, _ = _branch_grads(sc, x, lambda o: ad.bce_loss(o.fusion, fusion_p, soft=True) * 0.5
                            + sum((ad.bce_loss(s, y) * 0.5 for s in o.shortcuts), Tensor(0.0)))
    sc_max = max(float(np.max(np.abs(g))) for g in g_sc.values())
    g_short, _ = _branch_grads(sc, x, lambda o: sum((ad.bce_loss(s, y) for s in o.shortcuts), Tensor(0.0)))
    dev = max(float(np.max(np.abs(g_sc[n] - 0.5 * g_short[n]))) for n in g_sc)
    return bfm_max, sc_max, dev


def branch_error_identity(kind, seed, arch=TINY_ARCH, channels=("abdores", "thorres"), batch=3):
    """Check that each branch output's error is (W_f rows of branch i)^T delta_f.

    Returns the max abs deviation between the backpropagated gradient at the
    branch output and the product of the fusion layer's weight rows with its
    pre-activation error (eval mode, so dropout is the identity).
    """
    model = assemble(Topology(TopologyKind.BFM, channels), kind, arch, seed)
    rng = np.random.default_rng(seed + 4000)
    x = rng.standard_normal((batch, arch.window, len(channels)))
    y = rng.integers(0, 2, batch)
    out = model.forward(x)
    ad.bce_loss(out.fusion, y).backward()
    delta_f = out.trace["fusion/dense1:pre"].grad
    w = model.params["fusion/dense1/W"].data
    worst, start = 0.0, 0
    for feat in out.features:
        width = feat.shape[-1]
        expected = delta_f @ w[start:start + width].T
        worst = max(worst, float(np.max(np.abs(feat.grad - expected))))
        start += width
    return worst


def run_all(seeds=(0,), quick=False, log=print):
    """Run the full suite; returns the list of :class:`CheckResult`."""
    results = []
    t0 = time.perf_counter()
    for seed in seeds:
        for name, fn in OP_CHECKS.items():
            results.append(fn(seed=seed))
            log(results[-1].line())
    topologies = ("SIM", "MIM", "BFM", "BFM_SC")
    for kind in ("CNN", "LSTM"):
        for topo in topologies:
            results.append(check_model(kind, topo, seed=seeds[0], max_entries=4 if quick else None))
            log(results[-1].line())
    for kind in ("CNN", "LSTM"):
        for seed in range(3 if quick else 10):
            dev = shortcut_identity(kind, seed)
            results.append(CheckResult(f"shortcut-identity[{kind}]", seed, dev, 1e-12, metric="max_abs_dev"))
            log(results[-1].line())
            bfm_max, sc_max, half_dev = starvation(kind, seed)
            results.append(CheckResult(f"starvation-bfm[{kind}]", seed, bfm_max, 1e-300, metric="max_abs_grad"))
            log(results[-1].line())
            # the shortcut gradient must be present (nonzero) and exactly half the shortcut-only one
            rel = half_dev / sc_max if sc_max > 0 else float("inf")
            results.append(CheckResult(f"starvation-bfm_sc[{kind}]", seed, rel, 1e-12,
                                       detail={"max_abs_grad": sc_max}, metric="rel_dev_half"))
            log(results[-1].line())
    log(f"elapsed {time.perf_counter() - t0:.1f} s")
    return results
