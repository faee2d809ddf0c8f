"""Shared oracles for the test-suite: finite differences, brute-force metrics, small tasks."""

from fractions import Fraction
import math

import numpy as np

from osheda import diffnet
from osheda.losses import StepTensors, Toggles, total_loss

EPS = 1e-5

# objective -> toggles; every objective carries l_cls, which is also checked on its own
OBJECTIVES = {
    "l_cls": Toggles(False, False, False, True),
    "l_inv": Toggles(True, False, False, True),
    "l_seg": Toggles(False, True, False, True),
    "l_osd": Toggles(False, False, True, True),
    "total": Toggles(True, True, True, True),
}


def random_stack(rng, max_dim=6, max_batch=4):
    """f_s, f_t, h plus one minibatch triple with fixed pseudo-labels."""
    d_s = int(rng.integers(1, max_dim + 1))
    d_t = int(rng.integers(1, max_dim + 1))
    r = int(rng.integers(2, max_dim + 1))
    n_known = int(rng.integers(2, 4))
    nets = (
        diffnet.build_representation_mapping(d_s, r, rng),
        diffnet.build_representation_mapping(d_t, r, rng),
        diffnet.build_classifier(r, n_known + 1, rng),
    )
    # random biases so leaky_relu sees both signs
    for net in nets:
        for p in net.params:
            if "b" in p:
                p["b"] = rng.normal(0, 0.3, size=p["b"].shape)
    n_s = int(rng.integers(1, max_batch + 1))
    n_l = int(rng.integers(1, max_batch + 1))
    n_u = int(rng.integers(2, max_batch + 1))
    batch = {
        "xs": rng.normal(size=(n_s, d_s)),
        "ys": rng.integers(0, n_known, size=n_s),
        "xl": rng.normal(size=(n_l, d_t)),
        "yl": rng.integers(0, n_known, size=n_l),
        "xu": rng.normal(size=(n_u, d_t)),
        "pseudo": rng.integers(0, n_known + 1, size=n_u),
        "lam": float(rng.uniform(0.05, 1.0)),
        "unk": n_known,
    }
    return nets, batch


def objective(nets, batch, toggles, backward=False):
    """Loss of one training step; with ``backward`` also fills every net's grads."""
    f_s, f_t, h = nets
    n_s, n_l = batch["xs"].shape[0], batch["xl"].shape[0]
    zs = f_s.forward(batch["xs"])
    zt = f_t.forward(np.concatenate([batch["xl"], batch["xu"]]))
    logits = h.forward(np.concatenate([zs, zt]))
    t = StepTensors(
        src_logits=logits[:n_s], src_reprs=zs, src_labels=batch["ys"],
        tl_logits=logits[n_s:n_s + n_l], tl_reprs=zt[:n_l], tl_labels=batch["yl"],
        tu_logits=logits[n_s + n_l:], tu_reprs=zt[n_l:], tu_pseudo=batch["pseudo"],
    )
    b = total_loss(t, batch["lam"], batch["unk"], toggles, stage2=True)
    if backward:
        g = t.grads
        for net in nets:
            net.zero_grad()
        d_z = h.backward(np.concatenate([g["src_logits"], g["tl_logits"], g["tu_logits"]]))
        d_z[:n_s] += g["src_reprs"]
        d_z[n_s:n_s + n_l] += g["tl_reprs"]
        d_z[n_s + n_l:] += g["tu_reprs"]
        f_s.backward(d_z[:n_s])
        f_t.backward(d_z[n_s:])
    return b


def flat_grads(nets):
    return np.concatenate([v.ravel() for net in nets for g in net.grads for v in g.values()])


def numeric_grads(nets, fn, eps=EPS):
    out = []
    for net in nets:
        for p in net.params:
            for v in p.values():
                for idx in np.ndindex(v.shape):
                    old = v[idx]
                    v[idx] = old + eps
                    up = fn()
                    v[idx] = old - eps
                    down = fn()
                    v[idx] = old
                    out.append((up - down) / (2 * eps))
    return np.asarray(out)


def gradcheck_objective(name, n_instances=100, max_seeds=400):
    """Worst relative error over the first ``n_instances`` checkable random instances."""
    worst, checked, seed = 0.0, 0, 0
    while checked < n_instances and seed < max_seeds:
        err, ok = gradcheck_instance(seed, name)
        seed += 1
        if ok:
            checked += 1
            worst = max(worst, err)
    return worst, checked


def relative_error(a, b, floor=1e-6):
    """||a - b|| / max(||a||, ||b||, floor); the floor keeps exact-zero gradients from dividing round-off by round-off."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def osd_margin(nets, batch):
    """Distance of the un-clamped open-set difference from the clamp point."""
    from osheda.losses import cross_entropy

    f_s, f_t, h = nets
    ls = h.forward(f_s.forward(batch["xs"]))
    lt = h.forward(f_t.forward(np.concatenate([batch["xl"], batch["xu"]])))
    ce_t, _ = cross_entropy(lt, np.full(lt.shape[0], batch["unk"]))
    ce_s, _ = cross_entropy(ls, np.full(ls.shape[0], batch["unk"]))
    return abs(ce_t - batch["lam"] * ce_s)


def kink_margin(nets, batch):
    """Smallest |pre-activation| entering any leaky_relu (the only non-smooth points)."""
    f_s, f_t, h = nets
    zs = f_s.forward(batch["xs"])
    cs = f_s._cache[0]
    zt = f_t.forward(np.concatenate([batch["xl"], batch["xu"]]))
    ct = f_t._cache[0]
    h.forward(np.concatenate([zs, zt]))
    ch = h._cache[0]
    out = np.inf
    for net, cache in ((f_s, cs), (f_t, ct), (h, ch)):
        for spec, saved in zip(net.layers, cache):
            if spec.kind == "leaky_relu":
                out = min(out, float(np.abs(saved).min()))
    return out


def gradcheck_instance(seed, name):
    """(relative error, checked?) for one random instance of one objective.

    Instances within 1e-3 of a leaky_relu kink or of the l_osd clamp are not
    differentiable at finite-difference scale and are reported unchecked.
    """
    rng = np.random.default_rng([seed, 7])
    nets, batch = random_stack(rng)
    toggles = OBJECTIVES[name]
    if kink_margin(nets, batch) < 1e-3:
        return 0.0, False
    if toggles.osd and osd_margin(nets, batch) < 1e-4:
        return 0.0, False
    objective(nets, batch, toggles, backward=True)
    analytic = flat_grads(nets)
    numeric = numeric_grads(nets, lambda: objective(nets, batch, toggles).total)
    return relative_error(analytic, numeric), True


# ---------------------------------------------------------------- metric oracle


def brute_force_scores(pred, truth, n_known):
    """OS*, UNK, HOS by explicit per-class counting in exact rationals."""
    accs = []
    for c in range(n_known):
        total = sum(1 for t in truth if t == c)
        if total == 0:
            continue
        hit = sum(1 for p, t in zip(pred, truth) if t == c and p == c)
        accs.append(Fraction(hit, total))
    os_star = sum(accs, Fraction(0)) / len(accs) * 100 if accs else Fraction(0)
    n_unk = sum(1 for t in truth if t == n_known)
    unk = Fraction(sum(1 for p, t in zip(pred, truth) if t == n_known and p == n_known), n_unk) * 100 if n_unk else Fraction(0)
    hos = 2 * os_star * unk / (os_star + unk) if os_star + unk > 0 else Fraction(0)
    return float(os_star), float(unk), float(hos)


def exact_n_unknown(n, lam_tenths):
    """floor((1 - lam) * n) with lam = lam_tenths / 10, in exact arithmetic."""
    return math.floor((1 - Fraction(lam_tenths, 10)) * n)
