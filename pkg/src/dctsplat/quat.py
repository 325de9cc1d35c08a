"""Quaternion helpers shared by the scene, motion and loss modules.

All quaternions are stored (w, x, y, z). Functions are batched over leading
dimensions and differentiable.
"""

import torch

IDENTITY = (1.0, 0.0, 0.0, 0.0)


def normalize(q, eps=1e-12):
    """Return q / ||q||, guarding against zero norm."""
    return q / q.norm(dim=-1, keepdim=True).clamp_min(eps)


def to_rotation_matrix(q):
    """Convert normalized quaternions (..., 4) to rotation matrices (..., 3, 3)."""
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def multiply(a, b):
    """Hamilton product a ⊗ b of two quaternion batches (..., 4)."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def conjugate(q):
    """Conjugate (= inverse for unit quaternions)."""
    w, x, y, z = q.unbind(-1)
    return torch.stack([w, -x, -y, -z], dim=-1)


def identity(n, dtype=torch.float32):
    out = torch.zeros(n, 4, dtype=dtype)
    out[:, 0] = 1.0
    return out
