from __future__ import annotations

import torch
import torch.nn.functional as F


def pose_loss(t, q_raw, t_target, q_target, rot_weight: float = 1.0, beta: float = 0.1):
    """Smooth-L1 translation term plus ``rot_weight * (1 - |<q, q*>|)``.

    Translation is summed over axes, both terms averaged over the batch. The
    absolute value makes ``q`` and ``-q`` equivalent. ``beta`` is the smooth-L1
    knee in meters.
    """
    t = torch.atleast_2d(t)
    q_raw = torch.atleast_2d(q_raw)
    t_target = torch.atleast_2d(t_target).to(t.dtype)
    q_target = torch.atleast_2d(q_target).to(t.dtype)
    trans = F.smooth_l1_loss(t, t_target, reduction="none", beta=beta).sum(dim=-1)
    q = F.normalize(q_raw, dim=-1)
    rot = 1.0 - (q * q_target).sum(dim=-1).abs()
    return (trans + rot_weight * rot).mean()
