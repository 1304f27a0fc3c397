"""Core differentiable kernels.

Dense primitives (conv2d, linear, layer_norm, softmax, gelu) are checked
wrappers over torch; bilinear grid sampling and modulated deformable
convolution are built here from gather + interpolation weights, with a
zero-padding convention for out-of-bounds samples. All ops are pure and
deterministic; every one of them has a brute-force oracle in the tests.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from ..errors import ShapeError

__all__ = [
    "conv2d",
    "linear",
    "layer_norm",
    "softmax",
    "gelu",
    "grid_sample_bilinear",
    "deformable_conv",
    "base_tap_grid",
]


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Standard cross-correlation with zero padding: (B,Cin,H,W) -> (B,Cout,H',W')."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d wants rank-4 input/weight, got {x.ndim}/{weight.ndim}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def linear(x: torch.Tensor, weight: torch.Tensor,
           bias: torch.Tensor | None = None) -> torch.Tensor:
    """x @ weight.T + bias over the last dimension."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"feature mismatch: input has {x.shape[-1]}, weight expects {weight.shape[1]}"
        )
    return F.linear(x, weight, bias)


def layer_norm(x: torch.Tensor, weight: torch.Tensor | None = None,
               bias: torch.Tensor | None = None, eps: float = 1e-6) -> torch.Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact (erf-based) GELU; smooth everywhere, which keeps central
    finite differences honest where ReLU kinks would not."""
    return F.gelu(x)


def grid_sample_bilinear(feature: torch.Tensor, locations: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``feature`` at continuous cell coordinates.

    feature: (B, C, H, W); locations: (B, Ho, Wo, 2) with locations[..., 0]
    the column (x) and locations[..., 1] the row (y), in units of input
    cells (integer values hit cell centers exactly). Out-of-bounds corners
    contribute zero. Differentiable in both arguments.
    """
    if feature.ndim != 4:
        raise ShapeError(f"feature must be (B,C,H,W), got rank {feature.ndim}")
    if locations.ndim != 4 or locations.shape[-1] != 2:
        raise ShapeError(f"locations must be (B,Ho,Wo,2), got {tuple(locations.shape)}")
    if locations.shape[0] != feature.shape[0]:
        raise ShapeError("batch mismatch between feature and locations")

    B, C, H, W = feature.shape
    _, Ho, Wo, _ = locations.shape
    x = locations[..., 0]
    y = locations[..., 1]

    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx1 = x - x0
    wy1 = y - y0
    flat = feature.reshape(B, C, H * W)

    out = feature.new_zeros((B, C, Ho, Wo))
    for dy in (0, 1):
        for dx in (0, 1):
            cx = x0 + dx
            cy = y0 + dy
            wgt = (wx1 if dx else 1.0 - wx1) * (wy1 if dy else 1.0 - wy1)
            valid = (cx >= 0) & (cx <= W - 1) & (cy >= 0) & (cy <= H - 1)
            # non-finite coords fail `valid`; index 0 keeps gather in range
            # while the NaN weight still poisons the output so divergence
            # checks downstream can see it
            xi = cx.clamp(0, W - 1).nan_to_num(0.0).long()
            yi = cy.clamp(0, H - 1).nan_to_num(0.0).long()
            idx = (yi * W + xi).reshape(B, 1, Ho * Wo).expand(B, C, Ho * Wo)
            vals = torch.gather(flat, 2, idx).reshape(B, C, Ho, Wo)
            out = out + vals * (wgt * valid.to(feature.dtype)).unsqueeze(1)
    return out


def base_tap_grid(k: int, device=None, dtype=None) -> torch.Tensor:
    """Relative tap positions of a k x k kernel around its center, as (k*k, 2)
    in (dx, dy) order, row-major over (ky, kx)."""
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"kernel size must be odd and >= 1, got {k}")
    r = k // 2
    ky, kx = torch.meshgrid(
        torch.arange(k, device=device, dtype=dtype or torch.float32),
        torch.arange(k, device=device, dtype=dtype or torch.float32),
        indexing="ij",
    )
    return torch.stack([(kx - r).reshape(-1), (ky - r).reshape(-1)], dim=1)


def deformable_conv(x: torch.Tensor, weight: torch.Tensor,
                    bias: torch.Tensor | None,
                    offsets: torch.Tensor, modulation: torch.Tensor) -> torch.Tensor:
    """Modulated deformable convolution, stride 1, same-size output.

    Each of the K*K taps of every output cell samples ``x`` bilinearly at
    (base tap position + learned offset), scales the sample by its
    modulation weight, then applies the ordinary convolution weights.

    offsets: (B, 2*K*K, H, W), channel 2t is the x (column) offset of tap t
    and 2t+1 its y (row) offset, taps ordered row-major over the kernel.
    modulation: (B, K*K, H, W), expected in [0, 1] (post-sigmoid).
    With zero offsets and unit modulation this reduces exactly to
    conv2d(x, weight, bias, padding=K//2).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("deformable_conv wants rank-4 input and weight")
    B, Cin, H, W = x.shape
    Cout, Cw, K, K2 = weight.shape
    if K != K2:
        raise ShapeError(f"kernel must be square, got {K}x{K2}")
    if Cw != Cin:
        raise ShapeError(f"channel mismatch: input {Cin}, weight expects {Cw}")
    if offsets.shape != (B, 2 * K * K, H, W):
        raise ShapeError(
            f"offsets shape {tuple(offsets.shape)} != {(B, 2 * K * K, H, W)}"
        )
    if modulation.shape != (B, K * K, H, W):
        raise ShapeError(
            f"modulation shape {tuple(modulation.shape)} != {(B, K * K, H, W)}"
        )

    taps = base_tap_grid(K, device=x.device, dtype=x.dtype)
    cols = torch.arange(W, device=x.device, dtype=x.dtype).view(1, 1, W)
    rows = torch.arange(H, device=x.device, dtype=x.dtype).view(1, H, 1)

    out = x.new_zeros((B, Cout, H, W))
    for t in range(K * K):
        loc_x = cols + taps[t, 0] + offsets[:, 2 * t]
        loc_y = rows + taps[t, 1] + offsets[:, 2 * t + 1]
        loc = torch.stack([loc_x, loc_y], dim=-1)
        sampled = grid_sample_bilinear(x, loc) * modulation[:, t].unsqueeze(1)
        ky, kx = divmod(t, K)
        out = out + torch.einsum("bchw,oc->bohw", sampled, weight[:, :, ky, kx])
    if bias is not None:
        if bias.shape != (Cout,):
            raise ShapeError(f"bias shape {tuple(bias.shape)} != ({Cout},)")
        out = out + bias.view(1, -1, 1, 1)
    return out
