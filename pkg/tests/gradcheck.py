"""Finite-difference gradient checks for single ops and the end-to-end FragNet loss."""

import zlib

import numpy as np

from fragnet import arch, config, nn, optim
from fragnet import tensor as T

from fragnet.tensor import Tensor

from oracles import central_difference, rel_error

STEP = 1e-5


def noise_floor(base, h):
    """Smallest gradient magnitude resolvable to 1e-4 relative at step h."""
    return 1e4 * np.finfo(np.float64).eps * max(abs(base), 1.0) / h


def probe(f, arr, index, base, h=STEP):
    """Central difference at step h, plus a flag for a kink inside [x-h, x+h].

    ReLU and max are piecewise linear. If one of the many activations
    downstream of ``arr[index]`` crosses a switch point inside the stencil,
    the one-sided slopes disagree by far more than curvature allows and the
    central difference is no longer an oracle for the derivative at x.
    """
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    fwd, bwd = (fp - base) / h, (base - fm) / h
    kink = abs(fwd - bwd) > 1e-4 * max(abs(fwd), abs(bwd), noise_floor(base, h))
    return (fp - fm) / (2 * h), kink


def fragnet_loss_gradcheck(q=16, writers=5, coords="per-tensor", n_random=20, seed=0, batch=1):
    """Return a dict with names, analytic, numeric, errors, floor, kinks.

    ``coords="per-tensor"`` checks one random element of every trainable
    tensor; ``"random"`` checks ``n_random`` tensors drawn at random.
    Every element is probed at step 1e-5. When that stencil straddles a
    kink the step is shrunk tenfold (at most twice) and the element is
    counted in ``kinks``; ``steps`` records the step actually used.
    """
    with T.precision("float64"):
        cfg = config.fragnet(q, writers)
        params = nn.init_parameters(cfg, seed)
        r = np.random.default_rng(seed + 1)
        # perturb beta/bias/gamma away from their init so their gradients are generic
        for name, t in params.trainable():
            if name.endswith((".beta", ".bias")):
                t.data[:] = r.normal(0, 0.1, t.data.shape)
            elif name.endswith(".gamma"):
                t.data[:] = 1 + r.normal(0, 0.1, t.data.shape)
        image = T.Tensor(r.random((batch, 64, 128, 1)))
        labels = r.integers(0, writers, batch)

        def loss_value():
            logits, n = arch.forward_logits(params, cfg, image, "train")
            return optim.batch_loss(logits, labels, n)[0]

        loss = loss_value()
        base = loss.item()
        loss.backward()
        named = params.trainable()
        if coords == "per-tensor":
            chosen = list(range(len(named)))
        else:
            chosen = sorted(r.choice(len(named), size=n_random, replace=False))
        names, ana, num, steps = [], [], [], []
        for ti in chosen:
            name, t = named[ti]
            flat = t.data.reshape(-1)
            idx = int(r.integers(flat.size))
            h = STEP
            numeric, kink = probe(lambda: loss_value().item(), flat, idx, base, h)
            while kink and h > STEP / 100:
                h /= 10
                numeric, kink = probe(lambda: loss_value().item(), flat, idx, base, h)
            steps.append(h)
            names.append(f"{name}[{idx}]")
            ana.append(float(t.grad.reshape(-1)[idx]))
            num.append(numeric)
    errs = np.array([rel_error(a, n, noise_floor(base, h)) for a, n, h in zip(ana, num, steps)])
    steps = np.array(steps)
    return dict(names=names, analytic=np.array(ana), numeric=np.array(num),
                errors=errs, steps=steps, kinks=int((steps < STEP).sum()))


# -- single ops ------------------------------------------------------------

def _grad_check(build, arrays_, n_coords=40, seed=0):
    """Compare analytic grads of ``build(*tensors)`` with central differences."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays_]
    build(*tensors).backward()
    r = np.random.default_rng(seed)
    errs = []
    for t in tensors:
        flat = t.data.reshape(-1)
        for idx in r.choice(flat.size, size=min(n_coords, flat.size), replace=False):
            num = central_difference(lambda: build(*[Tensor(u.data) for u in tensors]).item(), flat, idx)
            errs.append(rel_error(t.grad.reshape(-1)[idx], num))
    return np.asarray(errs)


def _weighted(out):
    # a fixed random weighting keeps the loss from being a plain sum
    w = np.random.default_rng(99).normal(size=out.shape)
    return T.tensor_sum(_Mul.apply(out, Tensor(w)))


class _Mul(T.Function):
    def forward(self, a, b):
        self.saved["b"] = b
        return a * b

    def backward(self, grad):
        return grad * self.saved["b"], None


GRAD_CASES = {
    "conv2d": (lambda x, k, b: _weighted(T.conv2d(x, k, b)), [(2, 5, 6, 3), (3, 3, 3, 4), (4,)]),
    "maxpool2x2": (lambda x: _weighted(T.maxpool2x2(x)), [(2, 4, 6, 3)]),
    "batchnorm": (lambda x, g, b: _weighted(T.batchnorm(x, g, b, np.zeros(3), np.ones(3), "train")),
                  [(2, 3, 4, 3), (3,), (3,)]),
    "relu": (lambda x: _weighted(T.relu(x)), [(3, 7)]),
    "concat": (lambda a, b: _weighted(T.concat_channels(a, b)), [(1, 3, 3, 2), (1, 3, 3, 4)]),
    "crop": (lambda x: _weighted(T.crop(x, (1, 2, 3, 2))), [(2, 5, 6, 2)]),
    "crop_stack": (lambda x: _weighted(T.crop_stack(x, [(0, 0, 2, 2), (1, 1, 2, 2)])), [(2, 4, 4, 2)]),
    "gap": (lambda x: _weighted(T.global_avg_pool(x)), [(2, 3, 4, 5)]),
    "linear": (lambda x, w, b: _weighted(T.linear(x, w, b)), [(3, 4), (4, 5), (5,)]),
    "batchnorm_eval": (lambda x, g, b: _weighted(T.batchnorm(x, g, b, np.array([0.2, -0.1]),
                                                               np.array([1.5, 0.7]), "eval")),
                       [(2, 3, 3, 2), (2,), (2,)]),
    "add": (lambda a, b: _weighted(T.add(a, b)), [(2, 3, 4), (2, 3, 4)]),
    "scale": (lambda a: _weighted(T.scale(a, -1.7)), [(3, 5)]),
    "sum": (lambda a: T.tensor_sum(a), [(4, 3)]),
    "softmax_ce": (lambda z: _weighted(T.softmax_cross_entropy(z, np.array([0, 2, 4, 1]))[0]), [(4, 5)]),
}


def op_gradcheck(name, n_coords=40):
    """Relative errors of one op's analytic gradient at random coordinates (float64)."""
    build, shapes = GRAD_CASES[name]
    with T.precision("float64"):
        r = np.random.default_rng(zlib.crc32(name.encode()))
        arrays_ = [r.normal(size=s) for s in shapes]
        if name.startswith("batchnorm"):
            arrays_[1] = 1 + 0.3 * arrays_[1]  # keep gamma away from zero
        return _grad_check(build, arrays_, n_coords)
