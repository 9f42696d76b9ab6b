"""Pixel, content, texture and least-squares adversarial losses and their weighted combination.

All functions take torch tensors shaped (B, C, H, W) and average over the batch.
SR/HR images passed to the feature-based losses are in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .errors import ConfigurationError, InputError
from .features import FeatureExtractor

ABLATIONS = ("full", "without_content", "without_texture")
COMPONENTS = ("adv", "pixel", "content", "texture")


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of ``alpha*adv + (1-alpha)(1-beta)(1-gamma)*pixel + gamma*content + beta*texture``."""

    alpha: float = 0.35
    beta: float = 0.20
    gamma: float = 0.15
    charbonnier_eps: float = 1e-3
    ablation: str = "full"

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.charbonnier_eps <= 0:
            raise ConfigurationError(f"charbonnier_eps must be > 0, got {self.charbonnier_eps}")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    def effective(self) -> "LossWeights":
        """Weights with the ablated term's coefficient forced to zero."""
        if self.ablation == "without_content":
            return replace(self, gamma=0.0)
        if self.ablation == "without_texture":
            return replace(self, beta=0.0)
        return self

    @property
    def coefficients(self) -> dict[str, float]:
        w = self.effective()
        return {
            "adv": w.alpha,
            "pixel": (1.0 - w.alpha) * (1.0 - w.beta) * (1.0 - w.gamma),
            "content": w.gamma,
            "texture": w.beta,
        }

    @property
    def pixel_coefficient(self) -> float:
        return self.coefficients["pixel"]


def _same_shape(a, b):
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def charbonnier_loss(sr, hr, eps: float = 1e-3):
    _same_shape(sr, hr)
    return torch.sqrt((sr - hr) ** 2 + eps * eps).mean()


def content_loss(sr, hr, extractor: FeatureExtractor, tap: str = "relu5_4"):
    """Squared feature distance at ``tap``, summed over channels and divided by the tap's h*w."""
    _same_shape(sr, hr)
    return content_from_features(extractor(sr, [tap])[tap], extractor(hr, [tap])[tap])


def content_from_features(f_sr, f_hr):
    h, w = f_sr.shape[2:]
    return ((f_hr - f_sr) ** 2).sum(dim=(1, 2, 3)).mean() / (h * w)


def gram_matrix(features):
    """(B, C, H, W) -> (B, C, C) inner products of the vectorized channel maps."""
    b, c = features.shape[:2]
    flat = features.reshape(b, c, -1)
    return flat @ flat.transpose(1, 2)


def texture_loss(sr, hr, extractor: FeatureExtractor, layer: str = "relu2_2"):
    """Frobenius distance between Gram matrices at ``layer``, scaled by 1/c^2."""
    _same_shape(sr, hr)
    return texture_from_features(extractor(sr, [layer])[layer], extractor(hr, [layer])[layer])


def texture_from_features(f_sr, f_hr):
    c = f_sr.shape[1]
    diff = gram_matrix(f_sr) - gram_matrix(f_hr)
    # vector_norm has a zero subgradient at 0, unlike sqrt(sum(...))
    return torch.linalg.vector_norm(diff.flatten(1), dim=1).mean() / (c * c)


def adversarial_losses(d_real, d_fake):
    """Least-squares objectives from mean patch scores.

    Returns ``(g_loss, d_loss)`` with ``d_loss = D(SR)^2 + (D(HR) - 1)^2`` and
    ``g_loss = (D(SR) - 1)^2``, each averaged over the batch.
    """
    d_real = torch.as_tensor(d_real, dtype=torch.float64) if not torch.is_tensor(d_real) else d_real
    d_fake = torch.as_tensor(d_fake, dtype=torch.float64) if not torch.is_tensor(d_fake) else d_fake
    d_loss = (d_fake**2 + (d_real - 1.0) ** 2).mean()
    g_loss = ((d_fake - 1.0) ** 2).mean()
    return g_loss, d_loss


def hybrid_loss(components: dict, weights: LossWeights = LossWeights()):
    """Weighted total and a float breakdown ``{adv, pixel, content, texture, total}``.

    A component may be omitted (or None) only when its coefficient is zero.
    """
    coeffs = weights.coefficients
    total = None
    breakdown = {}
    for name in COMPONENTS:
        value = components.get(name)
        if value is None:
            if coeffs[name] != 0.0:
                raise InputError(f"loss component {name!r} is required (coefficient {coeffs[name]})")
            breakdown[name] = 0.0
            continue
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise InputError(f"loss component {name!r} is not finite")
        term = coeffs[name] * value
        total = term if total is None else total + term
        breakdown[name] = float(torch.as_tensor(value).detach()) if coeffs[name] != 0.0 else 0.0
    if total is None:
        total = torch.zeros(())
    breakdown["total"] = float(torch.as_tensor(total).detach())
    return total, breakdown


class GeneratorObjective:
    """Evaluates every generator-side term for a batch; terms with zero weight are skipped.

    ``sr``/``hr`` come in network range [-1, 1]; every term sees them mapped to [0, 1].
    """

    def __init__(self, weights: LossWeights, extractor: FeatureExtractor | None,
                 content_tap: str = "relu5_4", texture_tap: str = "relu2_2"):
        self.weights = weights
        self.extractor = extractor
        self.content_tap = content_tap
        self.texture_tap = texture_tap
        coeffs = weights.coefficients
        if extractor is not None:
            if coeffs["content"]:
                extractor.tap_index(content_tap)
            if coeffs["texture"]:
                extractor.tap_index(texture_tap)
        elif coeffs["content"] or coeffs["texture"]:
            raise ConfigurationError("content/texture losses need a feature extractor")

    def __call__(self, sr, hr, d_fake_score=None):
        coeffs = self.weights.coefficients
        sr01, hr01 = (sr + 1.0) * 0.5, (hr + 1.0) * 0.5
        comps = {"pixel": charbonnier_loss(sr01, hr01, self.weights.charbonnier_eps)}
        taps = [t for t, on in ((self.content_tap, coeffs["content"]), (self.texture_tap, coeffs["texture"])) if on]
        if taps:
            f_sr = self.extractor(sr01, taps)
            with torch.no_grad():
                f_hr = self.extractor(hr01, taps)
            if coeffs["content"]:
                comps["content"] = content_from_features(f_sr[self.content_tap], f_hr[self.content_tap])
            if coeffs["texture"]:
                comps["texture"] = texture_from_features(f_sr[self.texture_tap], f_hr[self.texture_tap])
        if coeffs["adv"]:
            if d_fake_score is None:
                raise InputError("adversarial term needs the discriminator score of the SR batch")
            comps["adv"] = adversarial_losses(torch.ones_like(d_fake_score), d_fake_score)[0]
        return hybrid_loss(comps, self.weights)
