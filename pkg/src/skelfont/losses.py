"""Loss terms for the translator and the weighted composite objective.

Adversarial terms default to the least-squares form; ``form="bce"``
switches to the logistic form. The skeleton-level terms route images
through the frozen skeleton translator so gradients reach the generator
through a differentiable skeletonization.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NonFiniteLoss, ShapeMismatch
from .networks import sg_forward

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "l1_pixel",
    "skeleton_consistency",
    "cycle_loss",
    "cls_loss",
    "adv_image",
    "adv_skeleton",
    "total_objective",
]

ADV_FORMS = ("lsgan", "bce")


@dataclass(frozen=True)
class LossWeights:
    """Coefficients for adversarial, cycle, classification, and content terms."""

    lambda1: float = 5.0
    lambda2: float = 10.0
    lambda3: float = 100.0
    lambda4: float = 10.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            v = getattr(self, name)
            if not (v >= 0.0 and v == v and v != float("inf")):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    pix: object
    sc: object
    cycle: object
    cls: object
    adv_i: object
    adv_s: object
    total: object

    def to_floats(self) -> "LossBreakdown":
        def val(x):
            return float(x.detach()) if torch.is_tensor(x) else float(x)

        return LossBreakdown(*(val(getattr(self, f)) for f in
                               ("pix", "sc", "cycle", "cls", "adv_i", "adv_s", "total")))

    def as_dict(self) -> dict:
        out = self.to_floats()
        return {f: getattr(out, f) for f in
                ("pix", "sc", "cycle", "cls", "adv_i", "adv_s", "total")}


def l1_pixel(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all pixels."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} != {tuple(b.shape)}")
    return (a - b).abs().mean()


def skeleton_consistency(sg, gen_out: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """L1 between the translated skeletons of the generated and target
    images. The caller keeps ``sg`` frozen; gradients still flow through
    it into ``gen_out``."""
    if gen_out.shape != target.shape:
        raise ShapeMismatch(f"{tuple(gen_out.shape)} != {tuple(target.shape)}")
    return l1_pixel(sg_forward(sg, gen_out), sg_forward(sg, target))


def cycle_loss(gf, gb, sg, x_img, x_skel, y_img, y_skel) -> torch.Tensor:
    """Round-trip reconstruction in both directions.

    The backward pass feeds each generated image together with its
    translated skeleton, mirroring how real inputs are paired.
    """
    fake_y = gf(x_img, x_skel)
    recon_x = gb(fake_y, sg_forward(sg, fake_y))
    fake_x = gb(y_img, y_skel)
    recon_y = gf(fake_x, sg_forward(sg, fake_x))
    return l1_pixel(recon_x, x_img) + l1_pixel(recon_y, y_img)


def _label_value(label) -> float:
    if isinstance(label, str):
        if label == "source":
            return 0.0
        if label == "target":
            return 1.0
        raise ValueError(f"label must be 'source' or 'target', got {label!r}")
    return float(label)


def cls_loss(domain_logit: torch.Tensor, label) -> torch.Tensor:
    """Binary cross entropy with logits against the domain label
    (source=0, target=1)."""
    logit = domain_logit if torch.is_tensor(domain_logit) else torch.as_tensor(domain_logit)
    logit = logit.reshape(-1)
    target = torch.full_like(logit, _label_value(label))
    return F.binary_cross_entropy_with_logits(logit, target)


def _adv_terms(patch: torch.Tensor, is_real: bool, form: str) -> torch.Tensor:
    if form == "lsgan":
        target = 1.0 if is_real else 0.0
        return ((patch - target) ** 2).mean()
    if form == "bce":
        target = torch.full_like(patch, 1.0 if is_real else 0.0)
        return F.binary_cross_entropy_with_logits(patch, target)
    raise ValueError(f"adv_form must be one of {ADV_FORMS}, got {form!r}")


def adv_image(d, real: torch.Tensor, fake: torch.Tensor, side: str, form: str = "lsgan") -> torch.Tensor:
    """Adversarial loss over the discriminator's patch map.

    Discriminator side scores real toward 1 and a detached fake toward 0;
    generator side scores the (attached) fake toward 1.
    """
    if real.shape != fake.shape:
        raise ShapeMismatch(f"{tuple(real.shape)} != {tuple(fake.shape)}")
    if side == "discriminator":
        patch_real, _ = d(real)
        patch_fake, _ = d(fake.detach())
        return _adv_terms(patch_real, True, form) + _adv_terms(patch_fake, False, form)
    if side == "generator":
        patch_fake, _ = d(fake)
        return _adv_terms(patch_fake, True, form)
    raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


def adv_skeleton(d_s, sg, real_target: torch.Tensor, gen_out: torch.Tensor,
                 side: str, form: str = "lsgan") -> torch.Tensor:
    """Adversarial loss over translated skeletons: the skeleton of the real
    target versus the skeleton of the generated image. Gradients reach the
    generator only through the fake branch."""
    real_sk = sg_forward(sg, real_target)
    fake_sk = sg_forward(sg, gen_out)
    return adv_image(d_s, real_sk.detach(), fake_sk, side, form)


def _check_finite(name: str, value) -> None:
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    if v != v or v in (float("inf"), float("-inf")):
        raise NonFiniteLoss(f"loss term {name!r} is {v}")


def total_objective(weights: LossWeights, *, pix=0.0, sc=0.0, cycle=0.0,
                    cls=0.0, adv_i=0.0, adv_s=0.0) -> LossBreakdown:
    """Weighted composite:

        total = l1*(adv_i + adv_s) + l2*cycle + l3*cls + l4*(pix + sc)

    Aborts with NonFiniteLoss if any part is NaN or infinite. Parts may be
    floats or scalar tensors; the total keeps whichever type supports the
    arithmetic (tensors win), so it can be backpropagated directly.
    """
    parts = {"pix": pix, "sc": sc, "cycle": cycle, "cls": cls,
             "adv_i": adv_i, "adv_s": adv_s}
    for name, value in parts.items():
        _check_finite(name, value)
    total = (
        weights.lambda1 * (adv_i + adv_s)
        + weights.lambda2 * cycle
        + weights.lambda3 * cls
        + weights.lambda4 * (pix + sc)
    )
    _check_finite("total", total)
    return LossBreakdown(pix=pix, sc=sc, cycle=cycle, cls=cls,
                         adv_i=adv_i, adv_s=adv_s, total=total)
