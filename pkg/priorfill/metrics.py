"""Six-metric evaluation: PSNR, SSIM, feature-space patch distance, FID and U-IDS / P-IDS.

Per-image kernels take H x W x C float arrays in [0, 1]. Distribution metrics take
n x d feature matrices.
"""

import math
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy import linalg, signal
from sklearn.svm import LinearSVC

from priorfill.config import MetricsConfig
from priorfill.corpus import load_image, tensor_to_unit
from priorfill.errors import MetricError, ShapeMismatchError
from priorfill.featnet import ClassifierEmbedder, Embedder, RandomProjectionEmbedder
from priorfill.models import EvalManifest, MetricReport

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"Image shapes differ: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 99.0) -> float:
    """10 * log10(1 / MSE) for images in [0, 1], capped (MSE = 0 gives the cap)."""
    _check_pair(a, b)
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: np.ndarray) -> float:
    def filt(x: np.ndarray) -> np.ndarray:
        return signal.convolve2d(x, window, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    numerator = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    denominator = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(numerator / denominator))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-window SSIM (11 x 11, sigma 1.5), averaged over channels."""
    _check_pair(a, b)
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise MetricError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    window = gaussian_window()
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], window) for c in range(a.shape[2])]))


def _unit_to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(image, np.float64) * 2.0 - 1.0).permute(2, 0, 1).unsqueeze(0)


def lpips(a: np.ndarray, b: np.ndarray, embedder: Optional[Embedder]) -> Optional[float]:
    """
    Patch-level feature distance: channel-normalized activations, squared L2 per
    position, spatially averaged, then averaged over layers.

    Returns:
        The distance, or None when no multi-layer feature network is available
    """
    _check_pair(a, b)
    layers_fn = getattr(embedder, "layers", None)
    if layers_fn is None:
        return None
    layers_a = layers_fn(_unit_to_tensor(a))
    layers_b = layers_fn(_unit_to_tensor(b))
    distances = []
    for fa, fb in zip(layers_a, layers_b, strict=True):
        na = fa / (fa.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10)
        nb = fb / (fb.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10)
        distances.append(float((na - nb).pow(2).sum(dim=1).mean()))
    return float(np.mean(distances))


def _sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def fid(real: np.ndarray, fake: np.ndarray, eps: float = 1e-6, imag_tol: float = 1e-3) -> float:
    """
    Frechet distance between Gaussians fit to two feature sets.

    The trace of (S_r S_f)^(1/2) is computed from the eigenvalues of the symmetric
    S_r^(1/2) S_f S_r^(1/2). Negative eigenvalues correspond to an imaginary
    residue; below `imag_tol` they are dropped, beyond it the metric fails.

    Raises:
        MetricError: On non-finite input, too few rows, or a non-PSD product
    """
    real = np.atleast_2d(np.asarray(real, np.float64))
    fake = np.atleast_2d(np.asarray(fake, np.float64))
    if real.shape[1] != fake.shape[1]:
        raise ShapeMismatchError(f"Feature dims differ: {real.shape[1]} vs {fake.shape[1]}")
    if real.shape[0] < 2 or fake.shape[0] < 2:
        raise MetricError("FID needs at least two samples per set")
    if not (np.isfinite(real).all() and np.isfinite(fake).all()):
        raise MetricError("FID features contain non-finite values")

    dim = real.shape[1]
    mu_r, mu_f = real.mean(axis=0), fake.mean(axis=0)
    sigma_r = np.atleast_2d(np.cov(real, rowvar=False)) + eps * np.eye(dim)
    sigma_f = np.atleast_2d(np.cov(fake, rowvar=False)) + eps * np.eye(dim)

    root_r = _sqrtm_psd(sigma_r)
    product = root_r @ sigma_f @ root_r
    values = linalg.eigvalsh((product + product.T) / 2.0)
    if values.min() < -imag_tol:
        raise MetricError(f"Covariance product is not PSD (min eigenvalue {values.min():.3g})")
    trace_sqrt = float(np.sqrt(np.clip(values, 0.0, None)).sum())

    distance = float(np.sum((mu_r - mu_f) ** 2) + np.trace(sigma_r) + np.trace(sigma_f) - 2.0 * trace_sqrt)
    return max(distance, 0.0)


def ids(
    real: np.ndarray, fake: np.ndarray, paired: bool = True, c: float = 1.0, max_iter: int = 20000
) -> tuple[float, Optional[float]]:
    """
    Linear-separability scores of real vs generated features.

    A soft-margin linear SVM is fit with real = +1 and fake = -1.
    U-IDS = (Pr[f(real) < 0] + Pr[f(fake) > 0]) / 2; P-IDS = Pr[f(fake_i) > f(real_i)]
    with a strict inequality, so identical pairs count as separated.

    Returns:
        (u_ids, p_ids); p_ids is None for unpaired sets

    Raises:
        MetricError: If the counts differ or the pooled features have zero variance
    """
    real = np.asarray(real, np.float64)
    fake = np.asarray(fake, np.float64)
    if real.shape != fake.shape:
        raise MetricError(f"IDS needs equal-sized feature sets, got {real.shape} and {fake.shape}")
    pooled = np.concatenate([real, fake])
    if not np.isfinite(pooled).all():
        raise MetricError("IDS features contain non-finite values")
    if np.all(pooled.var(axis=0) == 0):
        raise MetricError("IDS features have zero variance")

    labels = np.concatenate([np.ones(len(real)), -np.ones(len(fake))])
    svm = LinearSVC(C=c, dual=False, max_iter=max_iter, random_state=0)
    svm.fit(pooled, labels)
    f_real = svm.decision_function(real)
    f_fake = svm.decision_function(fake)
    u_ids = 0.5 * (float(np.mean(f_real < 0)) + float(np.mean(f_fake > 0)))
    p_ids = float(np.mean(f_fake > f_real)) if paired else None
    return u_ids, p_ids


# ============================================================================
# Report
# ============================================================================


def _score(
    reals: list[np.ndarray],
    fakes: list[np.ndarray],
    real_feats: np.ndarray,
    fake_feats: np.ndarray,
    embedder: Embedder,
    config: MetricsConfig,
) -> dict[str, Optional[float]]:
    scores: dict[str, Optional[float]] = {
        "psnr": float(np.mean([psnr(r, f, config.psnr_cap) for r, f in zip(reals, fakes, strict=True)])),
        "ssim": float(np.mean([ssim(r, f) for r, f in zip(reals, fakes, strict=True)])),
    }
    distances = [lpips(r, f, embedder) for r, f in zip(reals, fakes, strict=True)]
    scores["lpips"] = None if any(d is None for d in distances) else float(np.mean(distances))  # type: ignore[arg-type]
    try:
        scores["fid"] = fid(real_feats, fake_feats, config.fid_eps, config.imag_tol)
    except MetricError:
        scores["fid"] = None
    try:
        scores["u_ids"], scores["p_ids"] = ids(real_feats, fake_feats, True, config.svm_c, config.svm_max_iter)
    except MetricError:
        scores["u_ids"] = scores["p_ids"] = None
    return scores


def evaluate(
    manifest_path: Path,
    outputs_dir: Path,
    embedder: Optional[Embedder] = None,
    config: Optional[MetricsConfig] = None,
    report_dir: Optional[Path] = None,
) -> MetricReport:
    """
    Score method outputs (`<record_id>.png` in `outputs_dir`) against a manifest.

    Missing outputs are listed and the report is flagged incomplete. When
    `report_dir` is given, report.json and report.csv are written there.

    Raises:
        MetricError: If no output exists for any record
    """
    config = config or MetricsConfig()
    embedder = embedder or RandomProjectionEmbedder()
    manifest = EvalManifest.read(manifest_path)
    root = manifest_path.parent

    reals: list[np.ndarray] = []
    fakes: list[np.ndarray] = []
    real_tensors: list[torch.Tensor] = []
    fake_tensors: list[torch.Tensor] = []
    domains: list[str] = []
    missing: list[str] = []
    for record in manifest.records:
        output_path = outputs_dir / f"{record.record_id}.png"
        if not output_path.exists():
            missing.append(record.record_id)
            continue
        real = load_image(manifest.resolve(record.image_path, root))
        fake = load_image(output_path)
        if real.shape != fake.shape:
            raise ShapeMismatchError(
                f"Output {output_path} has shape {tuple(fake.shape)}, expected {tuple(real.shape)}"
            )
        real_tensors.append(real)
        fake_tensors.append(fake)
        reals.append(tensor_to_unit(real))
        fakes.append(tensor_to_unit(fake))
        domains.append(record.domain_tag)
    if not reals:
        raise MetricError(f"No outputs found in {outputs_dir} for manifest {manifest_path}")

    real_feats = embedder.embed(torch.stack(real_tensors))
    fake_feats = embedder.embed(torch.stack(fake_tensors))
    overall = _score(reals, fakes, real_feats, fake_feats, embedder, config)

    per_domain: dict[str, dict[str, Optional[float]]] = {}
    for domain in sorted(set(domains)):
        idx = [i for i, d in enumerate(domains) if d == domain]
        scores = _score(
            [reals[i] for i in idx], [fakes[i] for i in idx], real_feats[idx], fake_feats[idx], embedder, config
        )
        per_domain[domain] = {**scores, "n": len(idx)}

    report = MetricReport(
        psnr=overall["psnr"],  # type: ignore[arg-type]
        ssim=overall["ssim"],  # type: ignore[arg-type]
        lpips=overall["lpips"],
        fid=overall["fid"],
        u_ids=overall["u_ids"],
        p_ids=overall["p_ids"],
        n_samples=len(reals),
        config={
            **asdict(config),
            "feature_extractor": embedder.identity,
            "lpips_available": isinstance(embedder, ClassifierEmbedder),
            "manifest": str(manifest_path),
            "svm": {"kind": "LinearSVC", "C": config.svm_c, "dual": False, "max_iter": config.svm_max_iter},
            "p_ids_tie_rule": "strict",
        },
        incomplete=bool(missing),
        missing=missing,
        per_domain=per_domain,
    )
    if report_dir is not None:
        write_report(report, report_dir)
    return report


def write_report(report: MetricReport, report_dir: Path) -> tuple[Path, Path]:
    report_dir.mkdir(parents=True, exist_ok=True)
    json_path = report_dir / "report.json"
    csv_path = report_dir / "report.csv"
    json_path.write_text(report.to_json())
    csv_path.write_text(report.to_csv())
    return json_path, csv_path


def read_report(path: Path) -> MetricReport:
    return MetricReport.from_json(path.read_text())

