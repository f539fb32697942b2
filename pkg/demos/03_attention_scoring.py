#!/usr/bin/env python3
"""Look inside the slice scorer.

The scorer treats every pixel row of the stack as a token, runs a small
transformer over the rows, and emits a weight in (0, 1) per pixel.  This
script checks the attention arithmetic by hand, shows the zero-start
property, and compares parameter budgets with and without the scorer.
"""

from dataclasses import replace

import torch

from svrkit.network import (
    MultiHeadSelfAttention,
    SliceToVolumeRegressor,
    count_parameters,
    desk_scale_config,
    full_scale_config,
)


def naive_attention(module, x):
    """Per-head softmax(Q K^T / sqrt(d)) V, written as explicit loops."""
    batch, tokens, channels = x.shape
    heads, d = module.num_heads, module.head_dim
    q = module.q_proj(x).view(batch, tokens, heads, d)
    k = module.k_proj(x).view(batch, tokens, heads, d)
    v = module.v_proj(x).view(batch, tokens, heads, d)
    out = torch.zeros_like(q)
    for b in range(batch):
        for h in range(heads):
            scores = q[b, :, h] @ k[b, :, h].T / d ** 0.5
            out[b, :, h] = torch.softmax(scores, dim=-1) @ v[b, :, h]
    return module.o_proj(out.reshape(batch, tokens, channels))


def main():
    torch.manual_seed(0)

    attn = MultiHeadSelfAttention(hidden_dim=64, num_heads=4)
    x = torch.randn(2, 12, 64)
    with torch.no_grad():
        gap = (attn(x) - naive_attention(attn, x)).abs().max().item()
    print(f"batched vs hand-rolled attention, max |diff|: {gap:.2e}")

    # Fresh scorer: zero output layer pins every weight at 0.5.
    config = desk_scale_config()
    model = SliceToVolumeRegressor(config)
    stack = torch.rand(1, config.stack_slices, *config.volume_shape[1:])
    with torch.no_grad():
        scores = model.scorer(stack)
    print(f"untrained scores: min {scores.min():.3f}, max {scores.max():.3f}")

    # After a nudge to the output layer the weights become input-dependent.
    with torch.no_grad():
        model.scorer.out.weight.normal_(std=0.05)
        scores = model.scorer(stack)
    print(f"perturbed scores: min {scores.min():.3f}, max {scores.max():.3f}, "
          f"spread {float(scores.max() - scores.min()):.3f}")

    print("\nparameter budgets:")
    for name, cfg in (("full scale", full_scale_config()),
                      ("desk scale", desk_scale_config())):
        with_scorer = count_parameters(SliceToVolumeRegressor(cfg))
        plain = count_parameters(
            SliceToVolumeRegressor(replace(cfg, use_attention=False))
        )
        print(f"  {name}: {with_scorer:>12,} with scorer, {plain:>12,} without "
              f"({with_scorer - plain:,} in the scorer)")


if __name__ == "__main__":
    main()
