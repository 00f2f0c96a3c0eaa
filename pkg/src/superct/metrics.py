"""Image-quality metrics (RMSE in HU, windowed SSIM) and report tables."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Display window [800, 1200] on the water=1000 scale, i.e. [-200, 200] HU.
DISPLAY_WINDOW_HU = (-200.0, 200.0)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def rmse_hu(x_hat_hu, x_star_hu) -> float:
    a, b = _pair(x_hat_hu, x_star_hu)
    return float(np.sqrt(np.sum((a - b) ** 2) / a.size))


def ssim(x_hat_hu, x_star_hu, window=DISPLAY_WINDOW_HU, win_side: int = 8) -> float:
    """Mean SSIM over all ``win_side`` x ``win_side`` uniform windows.

    Both images are clipped to the display window and rescaled to [0, 1]
    first, so the dynamic range L is 1.
    """
    a, b = _pair(x_hat_hu, x_star_hu)
    lo, hi = window
    a = (np.clip(a, lo, hi) - lo) / (hi - lo)
    b = (np.clip(b, lo, hi) - lo) / (hi - lo)
    c1, c2 = 0.01**2, 0.03**2
    wa = sliding_window_view(a, (win_side, win_side))
    wb = sliding_window_view(b, (win_side, win_side))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = wa.var(axis=(-1, -2))
    var_b = wb.var(axis=(-1, -2))
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


@dataclass
class MetricReport:
    method: str
    rmse: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, x_hat_hu, x_star_hu):
        self.rmse.append(rmse_hu(x_hat_hu, x_star_hu))
        self.ssim.append(ssim(x_hat_hu, x_star_hu))

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse)) if self.rmse else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")


def write_reports_csv(path, reports):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["method", "image", "rmse_hu", "ssim"])
        for rep in reports:
            for i, (r, s) in enumerate(zip(rep.rmse, rep.ssim)):
                out.writerow([rep.method, i, repr(r), repr(s)])
            out.writerow([rep.method, "mean", repr(rep.mean_rmse), repr(rep.mean_ssim)])


def summary_table(reports) -> str:
    width = max([len(r.method) for r in reports] + [6])
    lines = [f"{'method':<{width}}  {'RMSE (HU)':>10}  {'SSIM':>7}"]
    for r in reports:
        lines.append(f"{r.method:<{width}}  {r.mean_rmse:10.2f}  {r.mean_ssim:7.4f}")
    return "\n".join(lines)
