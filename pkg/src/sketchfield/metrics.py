"""Quantitative evaluation: masked PSNR, Intersection-over-Sketch, SSIM."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage

PSNR_CAP_DB = 60.0
IOS_THRESHOLDS = np.arange(25, 226, 25) / 255.0  # 9 evenly spaced values on [25, 225]


def psnr_outside_sketch(
    base_render: np.ndarray, edited_render: np.ndarray, mask: np.ndarray
) -> float:
    """PSNR (dB, capped at 60) over pixels outside the sketch mask only."""
    a = np.asarray(base_render, dtype=np.float64)
    b = np.asarray(edited_render, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    outside = ~np.asarray(mask, dtype=bool)
    if a.ndim == 3:
        diff = (a - b)[outside]
    else:
        diff = (a - b)[outside]
    if diff.size == 0:
        return PSNR_CAP_DB
    mse = float(np.mean(diff**2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse)))


def ios(masks: list[np.ndarray], alpha_renders: list[np.ndarray]) -> float:
    """Fraction of sketch-mask pixels covered by the thresholded alpha render,
    averaged over views and over 9 thresholds spanning [25, 225]/255."""
    if len(masks) != len(alpha_renders):
        raise ValueError("need one alpha render per mask")
    per_tau = []
    for tau in IOS_THRESHOLDS:
        scores = []
        for mask, alpha in zip(masks, alpha_renders):
            m = np.asarray(mask, dtype=bool)
            if not m.any():
                warnings.warn("empty sketch mask skipped in IoS")
                continue
            covered = np.asarray(alpha) > tau
            scores.append(float(np.count_nonzero(m & covered)) / float(np.count_nonzero(m)))
        if not scores:
            return 0.0
        per_tau.append(float(np.mean(scores)))
    return float(np.mean(per_tau))


def ios_per_threshold(masks: list[np.ndarray], alpha_renders: list[np.ndarray]) -> np.ndarray:
    """Per-threshold IoS values (monotone non-increasing in the threshold)."""
    out = []
    for tau in IOS_THRESHOLDS:
        scores = []
        for mask, alpha in zip(masks, alpha_renders):
            m = np.asarray(mask, dtype=bool)
            if not m.any():
                continue
            covered = np.asarray(alpha) > tau
            scores.append(float(np.count_nonzero(m & covered)) / float(np.count_nonzero(m)))
        out.append(float(np.mean(scores)) if scores else 0.0)
    return np.array(out)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Grayscale inputs are compared directly; RGB inputs are averaged per
    channel. Border windows are cropped rather than padded.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], k1, k2) for c in range(a.shape[-1])]))
    kernel = _gaussian_kernel()
    pad = kernel.shape[0] // 2

    def win(x):
        return ndimage.correlate(x, kernel, mode="nearest")[pad:-pad, pad:-pad]

    c1 = k1**2
    c2 = k2**2
    mu_a = win(a)
    mu_b = win(b)
    var_a = win(a * a) - mu_a**2
    var_b = win(b * b) - mu_b**2
    cov = win(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class EvalReport:
    psnr: list[float]
    ios_score: float
    ssim_scores: list[float]
    provenance: dict = dc_field(default_factory=dict)

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else 0.0

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim_scores)) if self.ssim_scores else 0.0

    def to_json(self) -> dict:
        return {
            "psnr": self.psnr,
            "psnr_mean": self.psnr_mean,
            "ios": self.ios_score,
            "ssim": self.ssim_scores,
            "ssim_mean": self.ssim_mean,
            "provenance": self.provenance,
        }

    def table(self) -> str:
        lines = [f"{'view':>6} {'psnr_out (dB)':>14} {'ssim':>8}"]
        for i, (p, s) in enumerate(zip(self.psnr, self.ssim_scores)):
            lines.append(f"{i:>6} {p:>14.2f} {s:>8.4f}")
        lines.append(f"{'mean':>6} {self.psnr_mean:>14.2f} {self.ssim_mean:>8.4f}")
        lines.append(f"IoS (9-threshold mean): {self.ios_score:.4f}")
        return "\n".join(lines)


def evaluate(base_field, edited_field, sketches, step: float | None = None,
             background: tuple = (1.0, 1.0, 1.0)) -> EvalReport:
    """Render both fields from every sketch view and assemble the report."""
    from sketchfield.render import render_view

    psnrs: list[float] = []
    ssims: list[float] = []
    masks: list[np.ndarray] = []
    alphas: list[np.ndarray] = []
    for view in sketches.views:
        base_out = render_view(base_field, view.camera, step, background)
        edit_out = render_view(edited_field, view.camera, step, background)
        psnrs.append(psnr_outside_sketch(base_out.rgb, edit_out.rgb, view.mask))
        ssims.append(ssim(base_out.rgb, edit_out.rgb))
        masks.append(view.mask)
        alphas.append(edit_out.alpha)
    return EvalReport(
        psnr=psnrs,
        ios_score=ios(masks, alphas),
        ssim_scores=ssims,
        provenance={
            "views": len(sketches.views),
            "base_meta": dict(base_field.metadata.get("created", {})),
        },
    )
