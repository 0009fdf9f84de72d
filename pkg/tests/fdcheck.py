"""Central finite-difference gradient checker used by the gradient tests."""
import numpy as np
import torch

STEP = 1e-3
RTOL = 1e-4


def relative_gradient_error(fn, tensors, rng, coords_per_tensor=12, step=STEP):
    """Compare autograd against central differences on sampled coordinates.

    ``fn`` maps no arguments to a scalar and closes over ``tensors`` (float64
    leaves, modified in place during probing). Returns
    ``||g_fd - g_auto|| / ||g_auto||`` over all sampled coordinates.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    auto, numeric = [], []
    with torch.no_grad():
        for t in tensors:
            flat = t.view(-1)
            picks = rng.choice(flat.numel(), min(coords_per_tensor, flat.numel()), replace=False)
            g = t.grad.view(-1)
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + step
                up = fn().item()
                flat[i] = orig - step
                down = fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * step))
                auto.append(g[i].item())
    auto, numeric = np.array(auto), np.array(numeric)
    return float(np.linalg.norm(numeric - auto) / max(np.linalg.norm(auto), 1e-300))


def projected_loss(module_fn, out_shape_probe, seed):
    """Fixed random projection turning a tensor output into a scalar."""
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(out_shape_probe.shape, generator=gen, dtype=torch.float64)
    return lambda: (module_fn() * w).sum()
