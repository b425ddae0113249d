"""Real spherical harmonics up to degree 3 (orthonormal, no Condon-Shortley phase)."""

import torch

from .surfel import DTYPE

Y00 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005, 1.0925484305920792, 0.5462742152960396)
_C3 = (
    0.5900435899266435,
    2.890611442640554,
    0.4570457994644658,
    0.3731763325901154,
    0.4570457994644658,
    1.445305721320277,
    0.5900435899266435,
)

_DEGREE_OF_LEN = {1: 0, 4: 1, 9: 2, 16: 3}


def sh_basis(dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """Basis values (..., (degree+1)^2), ordered by band then m = -l..l."""
    if degree not in (0, 1, 2, 3):
        raise ValueError(f"unsupported SH degree {degree}")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [torch.full_like(x, Y00)]
    if degree >= 1:
        out += [_C1 * y, _C1 * z, _C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            _C2[0] * x * y,
            _C2[1] * y * z,
            _C2[2] * (3 * zz - 1),
            _C2[3] * x * z,
            _C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            _C3[0] * y * (3 * xx - yy),
            _C3[1] * x * y * z,
            _C3[2] * y * (5 * zz - 1),
            _C3[3] * z * (5 * zz - 3),
            _C3[4] * x * (5 * zz - 1),
            _C3[5] * z * (xx - yy),
            _C3[6] * x * (xx - 3 * yy),
        ]
    return torch.stack(out, dim=-1)


def eval_sh(coeffs, dirs, degree: int | None = None) -> torch.Tensor:
    """Contract SH coefficients with the basis at ``dirs``.

    ``coeffs`` is (..., K) for a scalar signal or (..., K, C) for C channels;
    the channel axis is detected by ``coeffs.shape[-2] == K`` being a valid
    count. ``dirs`` is (..., 3) and broadcasts against the leading dims.
    """
    coeffs = torch.as_tensor(coeffs, dtype=DTYPE)
    dirs = torch.as_tensor(dirs, dtype=DTYPE)
    multichannel = coeffs.ndim >= 2 and coeffs.shape[-2] in _DEGREE_OF_LEN and coeffs.shape[-1] not in _DEGREE_OF_LEN
    k = coeffs.shape[-2] if multichannel else coeffs.shape[-1]
    if k not in _DEGREE_OF_LEN:
        raise ValueError(f"{k} SH coefficients do not form a complete set of bands")
    if degree is not None and k != (degree + 1) ** 2:
        raise ValueError(f"expected {(degree + 1) ** 2} SH coefficients for degree {degree}, got {k}")
    basis = sh_basis(dirs, _DEGREE_OF_LEN[k])
    if multichannel:
        return (basis.unsqueeze(-1) * coeffs).sum(-2)
    return (basis * coeffs).sum(-1)
