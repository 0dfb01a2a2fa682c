"""Shared test utilities: central finite differences and probe losses."""

import numpy as np
import torch

from redo.primitives import set_state_frozen


def central_differences(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Gradient of scalar f at x via central differences, elementwise."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def assert_grads_close(analytic: torch.Tensor, numeric: torch.Tensor,
                       rtol: float = 1e-3, atol: float = 1e-6, what: str = ""):
    diff = (analytic - numeric).abs()
    bound = atol + rtol * numeric.abs()
    worst = (diff - bound).max()
    assert (diff <= bound).all(), (
        f"{what}: gradient mismatch, worst excess {worst:.3e}; "
        f"analytic {analytic.flatten()[:4]}, numeric {numeric.flatten()[:4]}"
    )


def probe_loss(output: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Fixed random linear functional turning any output into a scalar."""
    return (output * weights).sum()


def check_module_gradients(module: torch.nn.Module, make_inputs, what: str,
                           rtol: float = 1e-3, extra_args=()):
    """Compare autograd input+parameter gradients of a module against
    central finite differences, in float64, with mutable state frozen."""
    module = module.double()
    module.train()
    set_state_frozen(module, True)
    inputs = make_inputs()
    gen = torch.Generator().manual_seed(1234)

    with torch.no_grad():
        out_shape = module(inputs, *extra_args).shape
    w = torch.randn(out_shape, generator=gen, dtype=torch.float64)

    x = inputs.clone().requires_grad_(True)
    loss = probe_loss(module(x, *extra_args), w)
    params = [p for p in module.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [x] + params, allow_unused=True)

    def f_of_x(xv):
        return probe_loss(module(xv, *extra_args), w)

    assert_grads_close(grads[0], central_differences(f_of_x, inputs),
                       rtol=rtol, what=f"{what}/input")

    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    for (name, p), g in zip(named, grads[1:]):
        if g is None:
            continue

        def f_of_p(pv, p=p):
            old = p.detach().clone()
            with torch.no_grad():
                p.copy_(pv)
            try:
                return probe_loss(module(inputs, *extra_args), w)
            finally:
                with torch.no_grad():
                    p.copy_(old)

        assert_grads_close(g, central_differences(f_of_p, p.detach()),
                           rtol=rtol, what=f"{what}/{name}")


def rand_image(shape, generator=None, dtype=torch.float32):
    return torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1


def random_simplex_masks(n, h, w, generator=None, batch=None, dtype=torch.float32):
    shape = (n, h, w) if batch is None else (batch, n, h, w)
    raw = torch.rand(shape, generator=generator, dtype=dtype) + 1e-3
    return raw / raw.sum(dim=-3, keepdim=True)


def quantized_simplex_masks(n, h, w, rng: np.random.Generator, levels: int = 64):
    """Mask sets whose entries are multiples of 1/levels and sum exactly to 1,
    so composition arithmetic is exact in float32."""
    counts = rng.multinomial(levels, [1 / n] * n, size=(h, w)).astype(np.float32)
    return torch.from_numpy(np.moveaxis(counts, -1, 0) / levels)


def quantized_images(c, h, w, rng: np.random.Generator, levels: int = 64):
    vals = rng.integers(-levels, levels + 1, size=(c, h, w)).astype(np.float32)
    return torch.from_numpy(vals / levels)
