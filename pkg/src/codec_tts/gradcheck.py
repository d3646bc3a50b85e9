"""Central finite-difference checks of reverse-mode gradients in float64."""
from __future__ import annotations

import copy

import numpy as np
import torch
from torch import nn
from torch.func import functional_call


def grad_check(operation, point, epsilon=1e-4, coords=None, refinements=2) -> float:
    """Max relative error between autograd and central differences.

    ``operation`` maps a float64 tensor shaped like ``point`` to a scalar.
    The error per coordinate is ``|g_a - g_fd| / max(1, |g_a|, |g_fd|)``.
    ``coords`` restricts the check to a subset of flat indices.

    A coordinate whose error exceeds a tenth of 1e-4 is re-measured with the
    step shrunk 100x, up to ``refinements`` times: piecewise-linear pieces
    (leaky ReLU, L1) put kinks inside a wide stencil, while a wrong analytic
    gradient disagrees at every step size.
    """
    x = torch.as_tensor(point, dtype=torch.float64).detach().clone().requires_grad_(True)
    (g_a,) = torch.autograd.grad(operation(x), x)
    g_a = g_a.reshape(-1)
    base = x.detach().reshape(-1)
    idx = range(base.numel()) if coords is None else coords

    def central(i, eps):
        plus, minus = base.clone(), base.clone()
        plus[i] += eps
        minus[i] -= eps
        return (float(operation(plus.view_as(x))) - float(operation(minus.view_as(x)))) / (2 * eps)

    worst = 0.0
    with torch.no_grad():
        for i in idx:
            ga = float(g_a[i])
            eps = epsilon
            for attempt in range(refinements + 1):
                fd = central(i, eps)
                err = abs(ga - fd) / max(1.0, abs(ga), abs(fd))
                if err <= 1e-5:
                    break
                eps /= 100.0
            worst = max(worst, err)
    return worst


class _Closure(nn.Module):
    def __init__(self, module, loss_fn):
        super().__init__()
        self.m = module
        self.loss_fn = loss_fn

    def forward(self):
        return self.loss_fn(self.m)


def module_grad_check(module: nn.Module, loss_fn, epsilon=1e-4, max_coords=None, seed=0) -> float:
    """Grad-check ``loss_fn(module)`` with respect to every trainable parameter.

    The module is copied to float64 first. With ``max_coords`` a seeded random
    subset of flat coordinates is checked instead of all of them.
    """
    module = copy.deepcopy(module).double()
    wrapper = _Closure(module, loss_fn)
    names, shapes, sizes = [], [], []
    for name, p in wrapper.named_parameters():
        if p.requires_grad:
            names.append(name)
            shapes.append(p.shape)
            sizes.append(p.numel())
    flat = torch.cat([p.detach().reshape(-1) for n, p in wrapper.named_parameters() if n in names])

    def operation(vec):
        params = {n: chunk.view(s) for n, chunk, s in zip(names, torch.split(vec.reshape(-1), sizes), shapes)}
        return functional_call(wrapper, params, ())

    coords = None
    if max_coords is not None and max_coords < flat.numel():
        coords = np.random.default_rng(seed).choice(flat.numel(), max_coords, replace=False).tolist()
    return grad_check(operation, flat, epsilon, coords)


def _lm_case(rng):
    from .codec import EOS, SOS
    from .lm import CodecLM, LmConfig
    from .losses import loss_ce

    cfg = LmConfig(hidden_dim=8, n_heads=2, n_blocks=1, ffn_dim=16, d_spk=8)
    torch.manual_seed(int(rng.integers(2**31)))
    net = CodecLM(cfg)
    for p in net.parameters():
        # default init is tiny (std 0.02); larger weights make the check meaningful
        torch.nn.init.normal_(p, std=0.3)
    tokens = rng.integers(0, 1024, 5).tolist()
    inputs = torch.tensor([[SOS] + tokens])
    targets = torch.tensor(tokens + [EOS])
    x_te = torch.as_tensor(rng.standard_normal((1, 4, 8)))
    x_se = torch.as_tensor(rng.standard_normal((1, 6, 8)))
    return net, lambda m: loss_ce(m(inputs, x_te, x_se)[0], targets)


def _codec_case(rng):
    from .codec import CodecNet

    torch.manual_seed(int(rng.integers(2**31)))
    net = CodecNet(code_dim=4, codebook_size=8, channels=(2, 2, 3, 3), dec_channels=4).double()
    net.codebooks.requires_grad_(False)
    samples = torch.as_tensor(0.5 * rng.standard_normal((1, 3 * 294)))
    target = torch.as_tensor(rng.standard_normal((1, 3, 80)))
    with torch.no_grad():
        z = net.encode(samples).reshape(-1, 4)
        ids, codes = net.quantize(z)
        offset = codes[0] - z

    def loss(m):
        recon, commit, _, _ = m.losses(samples, target, fixed_offset=offset, fixed_ids=ids)
        return recon + 0.25 * commit

    return net, loss


def _vocoder_case(rng):
    from .losses import TemporalDiscriminator, loss_gan_generator
    from .vocoder import VocoderNet

    torch.manual_seed(int(rng.integers(2**31)))
    gen = VocoderNet(channels=8, d_spk=8)
    disc = TemporalDiscriminator(channels=(4, 4, 4)).double().requires_grad_(False)
    mel = torch.as_tensor(rng.standard_normal((1, 2, 80)))
    spk = torch.as_tensor(rng.standard_normal((1, 8)))
    real = torch.as_tensor(0.3 * rng.standard_normal((1, 2 * 294)))

    def loss(m):
        fake = m(mel, spk)
        return loss_gan_generator(disc(fake), fake, real)

    return gen, loss


def _discriminator_case(rng):
    from .losses import TemporalDiscriminator, discriminator_loss

    torch.manual_seed(int(rng.integers(2**31)))
    disc = TemporalDiscriminator(channels=(4, 4, 4))
    for conv in disc.convs:
        torch.nn.init.normal_(conv.bias, std=0.1)
    real = torch.as_tensor(0.3 * rng.standard_normal((2, 600)))
    fake = torch.as_tensor(0.3 * rng.standard_normal((2, 600)))
    return disc, lambda m: discriminator_loss(m(real), m(fake))


GRADIENT_CASES = {
    "lm_block+l_ce": _lm_case,
    "codec_straight_through": _codec_case,
    "vocoder_generator+l_gan": _vocoder_case,
    "discriminator": _discriminator_case,
}


def gradient_suite(epsilon=1e-4, max_coords=None, seed=0) -> dict:
    """name -> max relative error for every trainable component, checked in float64."""
    rng = np.random.default_rng(seed)
    out = {}
    with torch.random.fork_rng(devices=[]):
        for name, build in GRADIENT_CASES.items():
            module, loss_fn = build(rng)
            out[name] = module_grad_check(module, loss_fn, epsilon, max_coords=max_coords, seed=seed)
    return out
