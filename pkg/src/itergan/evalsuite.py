"""Image-quality measures, non-learning baselines, Friedman test, and model evaluation.

All metric functions take H x W x 3 float arrays in [0, 1] (masks H x W in {0, 1}).
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from scipy import ndimage, signal, stats

from . import datahub

LOWER_IS_BETTER = ("l1", "l1m", "kl")
HIGHER_IS_BETTER = ("ssim", "vifp")
ALL_METRICS = ("l1", "l1m", "kl", "ssim", "vifp")
LUMA = (0.299, 0.587, 0.114)  # ITU-R BT.601

SSIM_WINDOW, SSIM_SIGMA, SSIM_K1, SSIM_K2 = 11, 1.5, 0.01, 0.03
VIF_SCALES, VIF_NOISE_VAR, VIF_EPS = 4, 2.0, 1e-10
KL_EPS = 1e-10
DEFAULT_EVAL_VIEWS = 6  # 30 degrees


def direction(metric):
    return "lower" if metric in LOWER_IS_BETTER else "higher"


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img @ np.array(LUMA)


def gaussian_window(size, sigma):
    """Normalized size x size Gaussian, MATLAB fspecial style."""
    r = (size - 1) / 2.0
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < np.finfo(float).eps * h.max()] = 0
    return h / h.sum()


# ----------------------------------------------------------------------------
# pixel metrics


def metric_l1(B, T):
    return float(np.mean(np.abs(np.asarray(B, np.float64) - np.asarray(T, np.float64))))


def metric_l1m(B, T, M):
    """Object pixels weigh twice the background; per-pixel error sums channels."""
    B, T = np.asarray(B, np.float64), np.asarray(T, np.float64)
    if B.shape != T.shape:
        raise ValueError(f"shape mismatch {B.shape} vs {T.shape}")
    M = np.asarray(M).astype(bool)
    if M.shape != B.shape[:2]:
        raise ValueError(f"mask shape {M.shape} does not match image {B.shape}")
    err = np.abs(T - B).sum(axis=-1)
    total = 0.0
    if M.any():
        total += 2.0 * err[M].mean()
    if (~M).any():
        total += err[~M].mean()
    return float(total)


def ssim(B, T):
    """Mean SSIM of the luminance channels (valid-window filtering)."""
    x, y = to_gray(B), to_gray(T)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window(SSIM_WINDOW, SSIM_SIGMA)

    def filt(a):
        return signal.correlate(a, w, mode="valid", method="direct")

    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def vifp(B, T):
    """Pixel-domain visual information fidelity of B against reference T.

    Four scales with Gaussian kernels of width 2**(5-s)+1 (sigma = width/5),
    symmetric boundary extension, grayscale on a 0-255 range.
    """
    dist, ref = to_gray(B) * 255.0, to_gray(T) * 255.0
    if dist.shape != ref.shape:
        raise ValueError(f"shape mismatch {dist.shape} vs {ref.shape}")
    num = den = 0.0
    for scale in range(1, VIF_SCALES + 1):
        n = 2 ** (VIF_SCALES - scale + 1) + 1
        w = gaussian_window(n, n / 5.0)

        def filt(a):
            return ndimage.correlate(a, w, mode="reflect")

        if scale > 1:
            ref, dist = filt(ref)[::2, ::2], filt(dist)[::2, ::2]
        mu1, mu2 = filt(ref), filt(dist)
        s1 = np.maximum(filt(ref * ref) - mu1 * mu1, 0)
        s2 = np.maximum(filt(dist * dist) - mu2 * mu2, 0)
        s12 = filt(ref * dist) - mu1 * mu2

        g = s12 / (s1 + VIF_EPS)
        sv = s2 - g * s12
        flat_ref = s1 < VIF_EPS
        g[flat_ref] = 0
        sv[flat_ref] = s2[flat_ref]
        s1[flat_ref] = 0
        flat_dist = s2 < VIF_EPS
        g[flat_dist] = 0
        sv[flat_dist] = 0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0
        sv[sv <= VIF_EPS] = VIF_EPS

        num += np.sum(np.log10(1 + g * g * s1 / (sv + VIF_NOISE_VAR)))
        den += np.sum(np.log10(1 + s1 / VIF_NOISE_VAR))
    if den == 0:
        return 1.0  # reference carries no information
    return float(num / den)


# ----------------------------------------------------------------------------
# label distributions


class LabelModel(Protocol):
    def __call__(self, image: np.ndarray) -> np.ndarray: ...


def _smooth(p):
    p = np.asarray(p, np.float64) + KL_EPS
    return p / p.sum()


def kl_divergence(p, q):
    p, q = _smooth(p), _smooth(q)
    return float(np.sum(p * np.log(p / q)))


def kl_label_divergence(label_model: LabelModel, B, T):
    return kl_divergence(label_model(B), label_model(T))


class RandomProjectionLabelModel:
    """Fixed random linear map of a block-averaged image, then softmax.

    A deterministic, offline stand-in for a pretrained classifier.
    """

    def __init__(self, n_labels=10, seed=0, grid=8, temperature=0.25):
        self.grid = grid
        self.temperature = temperature
        rng = np.random.default_rng(seed)
        self.weights = rng.standard_normal((n_labels, grid * grid * 3)) / math.sqrt(grid * grid * 3)

    def features(self, image):
        img = np.asarray(image, np.float64)
        h, w = img.shape[:2]
        gh, gw = h // self.grid, w // self.grid
        img = img[:gh * self.grid, :gw * self.grid]
        pooled = img.reshape(self.grid, gh, self.grid, gw, 3).mean(axis=(1, 3))
        return pooled.ravel() - 0.5

    def __call__(self, image):
        z = self.weights @ self.features(image) / self.temperature
        z = np.exp(z - z.max())
        return z / z.sum()


class Vgg16LabelModel:
    """ImageNet VGG16 label distribution (torchvision weights, downloaded on first use)."""

    def __init__(self, weights="DEFAULT"):
        import torch
        import torchvision

        self._torch = torch
        self.net = torchvision.models.vgg16(weights=weights).eval()
        self.mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        self.std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    def __call__(self, image):
        torch = self._torch
        x = torch.from_numpy(np.asarray(image, np.float32).transpose(2, 0, 1)).unsqueeze(0)
        x = torch.nn.functional.interpolate(x, size=(224, 224), mode="bilinear", align_corners=False)
        with torch.no_grad():
            logits = self.net((x - self.mean) / self.std)
        return torch.softmax(logits.double(), dim=1)[0].numpy()


# ----------------------------------------------------------------------------
# baselines


def identity_baseline(A):
    return A


def rotation_homography(height, width, degrees, focal=None):
    """Homography of the image plane turned ``degrees`` about its vertical centre line,
    seen through a pinhole camera with focal length ``focal`` pixels (default 1.2 x width).

    Estimated from the four corner correspondences by the direct linear transform.
    """
    if not -180 < degrees < 180:
        raise ValueError("degrees must lie in (-180, 180)")
    f = 1.2 * width if focal is None else focal
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    t = math.radians(degrees)
    src, dst = [], []
    for u, v in ((0, 0), (width - 1, 0), (width - 1, height - 1), (0, height - 1)):
        x, y = u - cx, v - cy
        xr, depth = x * math.cos(t), f + x * math.sin(t)
        if depth <= 0:
            raise ValueError(f"rotation of {degrees} degrees puts the plane behind the camera")
        src.append((u, v))
        dst.append((f * xr / depth + cx, f * y / depth + cy))
    return homography_dlt(src, dst)


def homography_dlt(src, dst):
    rows = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows, dtype=np.float64))
    H = vt[-1].reshape(3, 3)
    if abs(H[2, 2]) > 1e-15:
        H = H / H[2, 2]
    if abs(np.linalg.det(H)) < 1e-12:
        raise ValueError("degenerate homography")
    return H


def warp_homography(img, H):
    """Warp so that output(p) = img(H^-1 p); bilinear, black outside the frame."""
    img = np.asarray(img, dtype=np.float64)
    if abs(np.linalg.det(H)) < 1e-12:
        raise ValueError("degenerate homography")
    h, w = img.shape[:2]
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    p = np.linalg.inv(H) @ np.stack([u.ravel(), v.ravel(), np.ones(u.size)])
    with np.errstate(divide="ignore", invalid="ignore"):
        sx, sy = p[0] / p[2], p[1] / p[2]
    tol = 1e-9
    valid = (p[2] > 0) & (sx >= -tol) & (sx <= w - 1 + tol) & (sy >= -tol) & (sy <= h - 1 + tol)
    sx = np.clip(np.where(valid, sx, 0), 0, w - 1)
    sy = np.clip(np.where(valid, sy, 0), 0, h - 1)
    x0 = np.minimum(np.floor(sx).astype(int), w - 2 if w > 1 else 0)
    y0 = np.minimum(np.floor(sy).astype(int), h - 2 if h > 1 else 0)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = sx - x0, sy - y0
    if img.ndim == 3:
        fx, fy, valid = fx[:, None], fy[:, None], valid[:, None]
    out = (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x1] * fx * (1 - fy)
           + img[y1, x0] * (1 - fx) * fy + img[y1, x1] * fx * fy)
    out = np.where(valid, out, 0.0)
    return out.reshape(img.shape)


def projective_baseline(A, degrees, focal=None):
    h, w = np.asarray(A).shape[:2]
    return warp_homography(A, rotation_homography(h, w, degrees, focal))


# ----------------------------------------------------------------------------
# Friedman test


@dataclass
class FriedmanResult:
    statistic: float
    pvalue: float
    mean_ranks: np.ndarray


def within_pair_ranks(scores, direction="lower"):
    """Rank models inside each row (1 = best); ties share the mid-rank."""
    scores = np.asarray(scores, dtype=np.float64)
    keyed = scores if direction == "lower" else -scores
    return np.apply_along_axis(stats.rankdata, 1, keyed)


def friedman_test(scores, direction="lower") -> FriedmanResult:
    """Friedman chi-square over a (pairs x models) score table, tie-corrected."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError("need a (pairs x models) table with at least 2 models")
    n, k = scores.shape
    if n < 2:
        raise ValueError("need at least 2 pairs")
    if n < 10:
        warnings.warn(f"Friedman test on only {n} pairs; the chi-square approximation is rough",
                      stacklevel=2)
    ranks = within_pair_ranks(scores, direction)
    mean_ranks = ranks.mean(axis=0)
    ties = 0.0
    for row in ranks:
        _, counts = np.unique(row, return_counts=True)
        ties += float(np.sum(counts ** 3 - counts))
    correction = 1.0 - ties / (n * (k ** 3 - k))
    if correction <= 0:
        return FriedmanResult(0.0, 1.0, mean_ranks)
    stat = 12.0 * n / (k * (k + 1)) * float(np.sum((mean_ranks - (k + 1) / 2.0) ** 2)) / correction
    return FriedmanResult(stat, float(stats.chi2.sf(stat, k - 1)), mean_ranks)


# ----------------------------------------------------------------------------
# model evaluation and reports


@dataclass
class MetricReport:
    rows: list[dict]
    models: list[str]
    metrics: list[str]
    aggregates: dict = field(default_factory=dict)
    friedman: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def compute_aggregates(self):
        agg = {}
        for model in self.models:
            agg[model] = {}
            for m in self.metrics:
                vals = [r[m] for r in self.rows if r["model"] == model and r.get(m) is not None]
                agg[model][m] = {
                    "mean": float(np.mean(vals)) if vals else None,
                    "std": float(np.std(vals)) if vals else None,
                    "n": len(vals),
                    "direction": direction(m),
                }
        self.aggregates = agg
        return agg

    def score_table(self, metric):
        """(pairs x models) array over rows present for every model, keyed by (pair_id, k)."""
        by_key = {}
        for r in self.rows:
            if r.get(metric) is not None:
                by_key.setdefault((r["pair_id"], r["k"]), {})[r["model"]] = r[metric]
        keys = sorted(k for k, v in by_key.items() if all(m in v for m in self.models))
        return keys, np.array([[by_key[k][m] for m in self.models] for k in keys])

    def compute_friedman(self):
        out = {}
        for metric in self.metrics:
            keys, table = self.score_table(metric)
            if len(self.models) < 2 or len(keys) < 2:
                continue
            d = direction(metric)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                overall = friedman_test(table, d)
                pairwise = {}
                for i, j in combinations(range(len(self.models)), 2):
                    res = friedman_test(table[:, [i, j]], d)
                    pairwise[f"{self.models[i]} vs {self.models[j]}"] = {
                        "statistic": res.statistic, "p": res.pvalue,
                        "mean_ranks": [float(x) for x in res.mean_ranks]}
            out[metric] = {
                "statistic": overall.statistic, "p": overall.pvalue, "n_pairs": len(keys),
                "mean_ranks": dict(zip(self.models, (float(x) for x in overall.mean_ranks))),
                "pairwise": pairwise,
            }
        self.friedman = out
        return out

    def to_json(self):
        return {"version": 1, "models": self.models, "metrics": self.metrics, "rows": self.rows,
                "aggregates": self.aggregates, "friedman": self.friedman,
                "warnings": self.warnings, "meta": self.meta}

    @classmethod
    def from_json(cls, d):
        return cls(d["rows"], d["models"], d["metrics"], d.get("aggregates", {}),
                   d.get("friedman", {}), d.get("warnings", []), d.get("meta", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))

    def write_csv(self, path):
        cols = ["pair_id", "object_id", "base_angle", "k", "angle", "model", *self.metrics, "config_hash"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def combine_reports(reports) -> MetricReport:
    rows, models, metrics, warn = [], [], [], []
    for rep in reports:
        for m in rep.models:
            if m in models:
                raise ValueError(f"model {m!r} appears in more than one report")
            models.append(m)
        rows += rep.rows
        warn += rep.warnings
        metrics += [m for m in rep.metrics if m not in metrics]
    metrics = [m for m in metrics if all(m in rep.metrics for rep in reports)]
    out = MetricReport(sorted(rows, key=lambda r: (r["pair_id"], r["k"], r["model"])), models, metrics,
                       warnings=warn, meta={"inputs": [rep.meta for rep in reports]})
    out.compute_aggregates()
    out.compute_friedman()
    return out


def rotation_sweep(report: MetricReport, metric):
    """[(angle, model, mean metric, n)] over the k values present in the report."""
    acc = {}
    for r in report.rows:
        if r.get(metric) is not None:
            acc.setdefault((r["angle"], r["model"]), []).append(r[metric])
    return [(angle, model, float(np.mean(v)), len(v)) for (angle, model), v in sorted(acc.items())]


def _pair_id(object_id, base):
    return f"{object_id}:{base:03d}"


def _model_runner(model_ref, focal_scale):
    """Returns (name, run(A_batch in [-1,1] NHWC, views) -> NHWC [-1,1], meta)."""
    if model_ref in ("identity", "projective"):
        if model_ref == "identity":
            return "identity", lambda A, views: A, {"baseline": "identity"}

        def run(A, views):
            out = []
            for a in A:
                w = a.shape[1]
                warped = projective_baseline((a + 1) / 2, views * datahub.STEP, focal_scale * w)
                out.append(warped * 2 - 1)
            return np.stack(out).astype(np.float32)

        return "projective", run, {"baseline": "projective", "focal_scale": focal_scale}

    import torch

    from .checkpoint import load_checkpoint
    from .nets import iterate_generator

    model, header = load_checkpoint(model_ref)
    vpi = header.get("views_per_iter", 1)

    def run(A, views):
        if views % vpi:
            raise ValueError(f"rotation of {views} steps is not a multiple of {vpi} steps per call")
        x = torch.from_numpy(np.ascontiguousarray(A.transpose(0, 3, 1, 2)))
        with torch.no_grad():
            out, _ = iterate_generator(model.gen, x, views // vpi)
        return out.numpy().transpose(0, 2, 3, 1)

    name = header.get("variant", Path(model_ref).stem)
    return name, run, {"checkpoint": str(model_ref), **header}


def evaluate_model(model_ref, manifest, split="seen_test", metrics=ALL_METRICS, label_model=None,
                   ks=None, name=None, focal_scale=1.2, batch_size=16, config_hash=None) -> MetricReport:
    """Score a checkpoint path (or "identity" / "projective") on a test split.

    ``ks`` lists rotations in 5-degree steps (default: 30 degrees).
    """
    if split in ("seen", "unseen"):
        split = split + "_test"
    if split not in ("seen_test", "unseen_test"):
        raise ValueError(f"split must be seen_test or unseen_test, got {split!r}")
    metrics = list(metrics)
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    warn = []
    if "kl" in metrics and label_model is None:
        raise ValueError("the kl metric needs a label model")
    model_name, run, meta = _model_runner(model_ref, focal_scale)
    name = name or model_name
    ks = list(ks) if ks else [DEFAULT_EVAL_VIEWS]
    pairs = manifest.pairs(split)
    chash = config_hash or meta.get("config_hash") or _hash_meta(meta)

    rows = []
    for k in ks:
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            samples = [datahub.sample_pair(manifest, o, b, k) for o, b in chunk]
            A = np.stack([s.input for s in samples])
            out = run(A, k)
            for s, b in zip(samples, out):
                B01, T01 = (np.clip(b, -1, 1) + 1) / 2, (s.target + 1) / 2
                row = {"pair_id": _pair_id(s.object_id, s.base_angle), "object_id": s.object_id,
                       "base_angle": s.base_angle, "k": k, "angle": k * datahub.STEP,
                       "model": name, "config_hash": chash}
                for m in metrics:
                    row[m] = _score(m, B01, T01, s.mask, label_model)
                rows.append(row)
    if "l1m" in metrics and any(r["l1m"] is None for r in rows):
        warn.append(f"{name}: l1m skipped for pairs without masks")

    rows.sort(key=lambda r: (r["pair_id"], r["k"], r["model"]))
    rep = MetricReport(rows, [name], metrics, warnings=warn,
                       meta={"split": split, "ks": ks, "focal_scale": focal_scale,
                             "config_hash": chash, "model": name})
    rep.compute_aggregates()
    return rep


def _score(metric, B, T, M, label_model):
    if metric == "l1":
        return metric_l1(B, T)
    if metric == "l1m":
        return None if M is None else metric_l1m(B, T, M)
    if metric == "kl":
        return kl_label_divergence(label_model, B, T)
    if metric == "ssim":
        return ssim(B, T)
    return vifp(B, T)


def _hash_meta(meta):
    from .trainloop import config_hash

    return config_hash({k: v for k, v in meta.items() if isinstance(v, (str, int, float, list, dict))})


__all__ = [
    "ALL_METRICS", "FriedmanResult", "LabelModel", "MetricReport", "RandomProjectionLabelModel",
    "Vgg16LabelModel", "combine_reports", "evaluate_model", "friedman_test", "identity_baseline",
    "kl_label_divergence", "metric_l1", "metric_l1m", "projective_baseline", "rotation_homography",
    "rotation_sweep", "ssim", "vifp", "warp_homography",
]
