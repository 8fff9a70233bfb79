"""Synthetic articulated-figure dataset with exact part labels.

Each sample renders one randomly posed figure: a head disc tangent
above a torso rectangle, two arms hanging from the shoulders and two
legs from the hips.  A limb is a straight capsule split at its
midpoint joint into an upper and a lower part label.  All primitives
are pairwise disjoint by construction (attachments are tangent, angle
ranges keep limbs clear of the body and of each other), so per-part
pixel counts are unbiased estimates of the analytic shape areas under
the continuous random placement.

Head and torso carry distinct base colors, but all four limb labels
share one color: telling upper from lower arms or arms from legs
requires spatial context, not appearance.  Additive Gaussian noise
(clipped to [0,1]) finishes the image.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import GenerationError
from .imgio import (Image, read_image, read_pgm_labels, write_image,
                    write_pgm_labels)

HEAD, TORSO, UARM, LARM, ULEG, LLEG = 1, 2, 3, 4, 5, 6

BACKGROUND_COLOR = (0.93, 0.93, 0.88)
LIMB_COLOR = (0.15, 0.25, 0.80)
PART_COLORS = {
    HEAD: (0.91, 0.76, 0.60),
    TORSO: (0.80, 0.15, 0.15),
    UARM: LIMB_COLOR,
    LARM: LIMB_COLOR,
    ULEG: LIMB_COLOR,
    LLEG: LIMB_COLOR,
}


@dataclass
class Limb:
    start: tuple[float, float]
    direction: tuple[float, float]      # unit vector
    upper_len: float
    lower_len: float
    halfwidth: float
    upper_label: int
    lower_label: int


@dataclass
class Pose:
    head: tuple[float, float, float]            # cx, cy, r
    torso: tuple[float, float, float, float]    # cx, cy, w, h
    limbs: list[Limb]


@dataclass
class ToySample:
    image: Image
    gt: np.ndarray
    seed: int


def sample_pose(rng: np.random.Generator, h: int, w: int) -> Pose:
    """Draw one pose; may extend past the frame (caller retries)."""
    m = rng.uniform(0.55, 0.72) * min(h, w)
    tcx = w / 2 + rng.uniform(-0.14, 0.14) * w
    tcy = h / 2 + rng.uniform(-0.10, 0.10) * h

    tw, th = 0.30 * m, 0.36 * m
    head_r = 0.14 * m
    head = (tcx, tcy - th / 2 - head_r, head_r)

    arm_hw, arm_len = 0.065 * m, 0.16 * m
    leg_hw, leg_len = 0.075 * m, 0.17 * m
    limbs = []
    for side in (-1.0, 1.0):
        phi = math.radians(rng.uniform(25.0, 65.0))
        sx = tcx + side * (tw / 2 + arm_hw)
        sy = tcy - th / 2 + arm_hw + 0.01 * m
        limbs.append(Limb(start=(sx, sy),
                          direction=(side * math.sin(phi), math.cos(phi)),
                          upper_len=arm_len, lower_len=arm_len,
                          halfwidth=arm_hw,
                          upper_label=UARM, lower_label=LARM))
    for side in (-1.0, 1.0):
        alpha = math.radians(rng.uniform(-3.0, 22.0))
        hx = tcx + side * 0.105 * m
        hy = tcy + th / 2 + leg_hw
        limbs.append(Limb(start=(hx, hy),
                          direction=(side * math.sin(alpha), math.cos(alpha)),
                          upper_len=leg_len, lower_len=leg_len,
                          halfwidth=leg_hw,
                          upper_label=ULEG, lower_label=LLEG))
    return Pose(head=head, torso=(tcx, tcy, tw, th), limbs=limbs)


def pose_extents(pose: Pose) -> tuple[float, float, float, float]:
    hx, hy, r = pose.head
    tcx, tcy, tw, th = pose.torso
    x0 = min(hx - r, tcx - tw / 2)
    x1 = max(hx + r, tcx + tw / 2)
    y0 = min(hy - r, tcy - th / 2)
    y1 = max(hy + r, tcy + th / 2)
    for lm in pose.limbs:
        total = lm.upper_len + lm.lower_len
        ex = lm.start[0] + lm.direction[0] * total
        ey = lm.start[1] + lm.direction[1] * total
        x0 = min(x0, lm.start[0] - lm.halfwidth, ex - lm.halfwidth)
        x1 = max(x1, lm.start[0] + lm.halfwidth, ex + lm.halfwidth)
        y0 = min(y0, lm.start[1] - lm.halfwidth, ey - lm.halfwidth)
        y1 = max(y1, lm.start[1] + lm.halfwidth, ey + lm.halfwidth)
    return x0, y0, x1, y1


def pose_fits(pose: Pose, h: int, w: int, margin: float = 2.0) -> bool:
    x0, y0, x1, y1 = pose_extents(pose)
    return x0 >= margin and y0 >= margin and \
        x1 <= w - 1 - margin and y1 <= h - 1 - margin


def render_base(pose: Pose, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free base colors and exact canonical part labels."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    gt = np.zeros((h, w), dtype=np.int64)

    tcx, tcy, tw, th = pose.torso
    gt[(np.abs(xs - tcx) <= tw / 2) & (np.abs(ys - tcy) <= th / 2)] = TORSO

    hx, hy, r = pose.head
    gt[(xs - hx) ** 2 + (ys - hy) ** 2 <= r * r] = HEAD

    for lm in pose.limbs:
        ax, ay = lm.start
        ux, uy = lm.direction
        total = lm.upper_len + lm.lower_len
        t = (xs - ax) * ux + (ys - ay) * uy
        tc = np.clip(t, 0.0, total)
        d2 = (xs - (ax + tc * ux)) ** 2 + (ys - (ay + tc * uy)) ** 2
        inside = d2 <= lm.halfwidth ** 2
        gt[inside & (t < lm.upper_len)] = lm.upper_label
        gt[inside & (t >= lm.upper_len)] = lm.lower_label

    rgb = np.empty((h, w, 3))
    rgb[:] = BACKGROUND_COLOR
    for label, color in PART_COLORS.items():
        rgb[gt == label] = color
    return rgb, gt


def group_labels(gt: np.ndarray, parts: int) -> np.ndarray:
    """Collapse the six canonical part labels down to ``parts`` classes
    (label = min(canonical, parts)); parts=6 is the identity, parts=1
    yields a figure/background split."""
    return np.minimum(gt, parts)


def gen_toy(seed: int, n: int, size: tuple[int, int] = (64, 64),
            parts: int = 6, noise_sigma: float = 0.05) -> list[ToySample]:
    """Deterministic dataset of ``n`` posed figures.

    ``size`` is (H, W) with both sides >= 32; ``parts`` in [1, 6]
    selects the label granularity (ground truth has parts+1 labels
    including background).  Raises GenerationError when a pose cannot
    be fit into the frame after 100 attempts.
    """
    h, w = size
    if h < 32 or w < 32:
        raise ValueError("images must be at least 32x32")
    if not 1 <= parts <= 6:
        raise ValueError("parts must be in [1, 6]")
    samples = []
    for i in range(n):
        sample_seed = seed * 1_000_003 + i
        rng = np.random.default_rng(sample_seed)
        pose = None
        for _ in range(100):
            cand = sample_pose(rng, h, w)
            if pose_fits(cand, h, w):
                pose = cand
                break
        if pose is None:
            raise GenerationError(f"no feasible pose for sample {i} "
                                  f"within 100 attempts")
        rgb, gt = render_base(pose, h, w)
        if noise_sigma > 0:
            rgb = np.clip(rgb + rng.normal(0.0, noise_sigma, rgb.shape),
                          0.0, 1.0)
        gt = group_labels(gt, parts)
        if not (gt == 0).any():
            raise GenerationError(f"sample {i} has no background")
        samples.append(ToySample(image=Image.from_array(rgb), gt=gt,
                                 seed=sample_seed))
    return samples


# ---------------------------------------------------------------------------
# dataset cache: NNNN.ppm (image) + NNNN.pgm (labels) pairs


def save_dataset(dirpath: str, samples: list[ToySample]) -> None:
    os.makedirs(dirpath, exist_ok=True)
    for i, s in enumerate(samples):
        write_image(os.path.join(dirpath, f"{i:04d}.ppm"), s.image)
        write_pgm_labels(os.path.join(dirpath, f"{i:04d}.pgm"), s.gt)


def load_dataset(dirpath: str) -> list[ToySample]:
    """Read back a cached dataset; seeds are not recoverable from disk
    and load as -1."""
    names = sorted(f for f in os.listdir(dirpath)
                   if re.fullmatch(r"\d{4}\.ppm", f))
    samples = []
    for name in names:
        stem = name[:-4]
        img = read_image(os.path.join(dirpath, name))
        gt = read_pgm_labels(os.path.join(dirpath, f"{stem}.pgm"))
        samples.append(ToySample(image=img, gt=gt, seed=-1))
    return samples
