"""Finite-difference checks of every primitive and of the full canonicalisation energy."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

DEFAULT_POINTS = 10


def _scalar(t: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    # a fixed random projection turns any output into a scalar with a generic gradient
    return ad.sum(t * w)


def _cases(rng: np.random.Generator) -> dict:
    """name -> (input sampler, function of the inputs producing a tensor)."""
    def pos(*s):
        return lambda r: r.uniform(0.5, 2.0, s)

    def unif(*s):
        return lambda r: r.uniform(-1.0, 1.0, s)

    def away_from_zero(*s):
        return lambda r: r.choice([-1.0, 1.0], s) * r.uniform(0.2, 1.0, s)

    return {
        "add": ([unif(3, 4), unif(4)], lambda a, b: ad.add(a, b)),
        "sub": ([unif(3, 4), unif(3, 1)], lambda a, b: ad.sub(a, b)),
        "mul": ([unif(3, 4), unif(3, 4)], lambda a, b: ad.mul(a, b)),
        "div": ([unif(3, 4), pos(3, 4)], lambda a, b: ad.div(a, b)),
        "neg": ([unif(5)], lambda a: ad.neg(a)),
        "matmul": ([unif(3, 5), unif(5, 2)], lambda a, b: ad.matmul(a, b)),
        "conv2d": ([unif(2, 2, 6, 6), unif(3, 2, 3, 3), unif(3)],
                   lambda x, w, b: ad.conv2d(x, w, b, stride=1, padding=1)),
        "conv2d_strided": ([unif(1, 2, 8, 8), unif(3, 2, 4, 4), unif(3)],
                           lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1)),
        "conv_transpose2d": ([unif(1, 3, 4, 4), unif(3, 2, 4, 4), unif(2)],
                             lambda x, w, b: ad.conv_transpose2d(x, w, b)),
        "sin": ([unif(6)], lambda a: ad.sin(a * 3.0)),
        "relu": ([away_from_zero(6)], lambda a: ad.relu(a)),
        "leaky_relu": ([away_from_zero(6)], lambda a: ad.leaky_relu(a)),
        "sigmoid": ([unif(6)], lambda a: ad.sigmoid(a * 2.0)),
        "exp": ([unif(6)], lambda a: ad.exp(a)),
        "log": ([pos(6)], lambda a: ad.log(a)),
        "square": ([unif(6)], lambda a: ad.square(a)),
        "sum": ([unif(3, 4)], lambda a: ad.sum(a, axis=1)),
        "mean": ([unif(3, 4)], lambda a: ad.mean(a, axis=0, keepdims=True)),
        "maximum": ([away_from_zero(6)], lambda a: ad.maximum(a, 0.0)),
        "grid_sample_border": ([unif(1, 2, 5, 6), lambda r: r.uniform(-1.5, 6.5, (1, 4, 3, 2))],
                               lambda img, c: ad.grid_sample(img, c, padding="border")),
        "grid_sample_zeros": ([unif(1, 2, 5, 6), lambda r: r.uniform(-0.9, 4.9, (1, 4, 3, 2))],
                              lambda img, c: ad.grid_sample(img, c, padding="zeros")),
        "concat": ([unif(2, 3), unif(2, 2)], lambda a, b: ad.concat([a, b], axis=1)),
        "reshape": ([unif(2, 6)], lambda a: ad.reshape(a, (3, 4))),
        "getitem": ([unif(4, 5)], lambda a: a[1:, ::2]),
        "transpose": ([unif(2, 3, 4)], lambda a: ad.transpose(a, (2, 0, 1))),
    }


def check_primitives(points: int = DEFAULT_POINTS, seed: int = 0, eps: float = 1e-6) -> dict:
    """Max relative error per primitive over ``points`` random inputs (float64)."""
    rng = np.random.default_rng(seed)
    out = {}
    with ad.precision(np.float64):
        for name, (samplers, fn) in _cases(rng).items():
            worst = 0.0
            for _ in range(points):
                args = [s(rng) for s in samplers]
                probe = fn(*[ad.as_tensor(a) for a in args]).data
                w = rng.standard_normal(probe.shape)
                err = ad.gradient_check(lambda *t: _scalar(fn(*t), w), args, eps=eps, rng=rng)
                worst = max(worst, err)
            out[name] = worst
    return out


def _pipeline(rng: np.random.Generator, size: int = 16) -> tuple:
    from .diffeo import boundary_taper
    from .energy import EnergyNets, EnergyWeights, e_can_tensor
    from .nets.models import Discriminator, VaeNet
    from .nets.siren import SirenNet, siren_field

    siren = SirenNet((2, 16, 16, 2), omega0=30.0, seed=int(rng.integers(1 << 30)), zero_head=False)
    vae = VaeNet((size, size), latent_dim=4, channels=(4, 4), kl_weight=0.1, seed=1)
    disc = Discriminator((size, size), channels=(4, 4), seed=2)
    x = np.clip(rng.uniform(0, 1, (size, size)), 0, 1)
    nets = EnergyNets(vae, disc)
    w = EnergyWeights(0.5, 0.3, 1.0, 10.0)
    taper = boundary_taper(size, size)
    params = siren.parameters()

    names = [k for k, _ in siren.named_parameters()]

    def energy(*ps):
        # route the checker's leaf tensors into the network
        for name, val in zip(names, ps):
            _assign(siren, name, val)
        v = siren_field(siren, (size, size), 2.0, taper)
        total, _, _ = e_can_tensor(x, v, nets, w, n=4)
        return total

    return energy, [p.data.copy() for p in params]


def _assign(module, dotted: str, value) -> None:
    parts = dotted.split(".")
    obj = module
    for p in parts[:-1]:
        obj = obj[int(p)] if p.isdigit() else getattr(obj, p)
    setattr(obj, parts[-1], value)


def check_pipeline(points: int = DEFAULT_POINTS, seed: int = 0, eps: float = 1e-7,
                   n_coords: int = 12) -> float:
    """Max relative error of d E_can / d SIREN-weights over ``points`` random networks.

    The energy is piecewise smooth (leaky ReLU, bilinear cells, the hinge on det J),
    so the step is kept small enough that a kink rarely falls inside it.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    with ad.precision(np.float64):
        for _ in range(points):
            energy, start = _pipeline(rng)
            err = ad.gradient_check(energy, start, eps=eps, n_coords=n_coords, rng=rng)
            worst = max(worst, err)
    return worst


def run_all(points: int = DEFAULT_POINTS, seed: int = 0) -> dict:
    table = check_primitives(points, seed)
    table["e_can_pipeline"] = check_pipeline(points, seed)
    return table


def format_table(table: dict, tol: float = 1e-3) -> str:
    width = max(len(k) for k in table)
    lines = [f"{'primitive':<{width}}  max_rel_err  status"]
    for k, v in table.items():
        lines.append(f"{k:<{width}}  {v:11.3e}  {'ok' if v < tol else 'FAIL'}")
    return "\n".join(lines)
