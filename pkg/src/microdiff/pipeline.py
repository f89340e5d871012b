"""Mass generation, surrogate filtering, ranking, and FEM validation of designs."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import surrogate as surrogate_mod
from .context import ContextBundle
from .dataset import EnergyCurve, to_property_field
from .diffusion import NoiseSchedule, p_sample_loop
from .errors import NonConvergenceError
from .fem import LoadSchedule, run_uniaxial_extension
from .unet import crop_to_bitmap

MSE_QUANTILES = (0, 5, 50, 95, 100)


@dataclass
class GenerationTarget:
    """What to generate: behavior curve, optional topology, and the filter policy."""

    behavior: EnergyCurve
    topology: np.ndarray | None = None
    mse_limit: float = 1e-4
    n_accept: int = 512
    max_generated: int = 16384

    def __post_init__(self):
        if self.mse_limit < 0:
            raise ValueError("mse_limit must be non-negative")
        if self.n_accept < 1:
            raise ValueError("n_accept must be at least 1")

    def context(self) -> ContextBundle:
        return ContextBundle(curve=self.behavior.energies, topology=self.topology)


@dataclass
class FilterReport:
    """Per-sample surrogate scores and batch statistics for one generation run."""

    generated_count: int
    accepted_count: int
    sample_ids: np.ndarray
    mses: np.ndarray
    accepted: np.ndarray
    mse_limit: float
    seed: int
    status: str  # 'ok' (n_accept reached), 'partial', or 'exhausted' (none accepted)
    quantiles: dict = field(default_factory=dict)
    mean_accepted_intensity: float = float("nan")

    def validate(self):
        assert self.generated_count == len(self.sample_ids) == len(self.mses)
        assert self.accepted_count == int(self.accepted.sum())
        assert self.accepted_count <= self.generated_count
        if self.accepted_count:
            assert float(self.mses[self.accepted].max()) < self.mse_limit

    def to_csv(self, path):
        lines = ["sample_id,surrogate_mse,accepted"]
        for sid, err, acc in zip(self.sample_ids, self.mses, self.accepted):
            lines.append(f"{int(sid)},{err:.17g},{int(acc)}")
        Path(path).write_text("\n".join(lines) + "\n")

    def summary(self) -> dict:
        out = {
            "generated_count": self.generated_count,
            "accepted_count": self.accepted_count,
            "mse_limit": self.mse_limit,
            "status": self.status,
            "seed": self.seed,
            "mean_accepted_intensity": self.mean_accepted_intensity,
        }
        for q, v in self.quantiles.items():
            out[f"mse_q{q:03d}"] = v
        return out


def _mse_quantiles(mses):
    return {q: float(np.percentile(mses, q)) for q in MSE_QUANTILES}


def _build_report(mses, accepted, limit, seed, status, images):
    mses = np.asarray(mses, dtype=np.float64)
    accepted = np.asarray(accepted, dtype=bool)
    mean_intensity = float(np.mean([img.mean() for img in images[accepted]])) \
        if accepted.any() else float("nan")
    report = FilterReport(
        generated_count=len(mses),
        accepted_count=int(accepted.sum()),
        sample_ids=np.arange(len(mses)),
        mses=mses,
        accepted=accepted,
        mse_limit=limit,
        seed=seed,
        status=status,
        quantiles=_mse_quantiles(mses) if len(mses) else {},
        mean_accepted_intensity=mean_intensity,
    )
    report.validate()
    return report


def generate_and_filter(model, sched: NoiseSchedule, surrogate_model,
                        target: GenerationTarget, seed: int = 0,
                        batch_size: int = 64, cache_dir=None,
                        snapshot_steps=(), clip_denoised: bool = True,
                        progress=None):
    """Sample conditioned batches until n_accept pass the surrogate filter.

    Returns (accepted_images, report, snapshots). Acceptance is decided by the
    surrogate MSE against the target curve being strictly below the limit;
    samples are accepted in generation order up to n_accept. Each generated
    batch is optionally cached to `cache_dir` as .npy for cheap re-filtering.
    Reaching the cap with zero acceptances is reported as status 'exhausted',
    not raised.
    """
    model.eval()
    generator = torch.Generator().manual_seed(seed)
    context_kwargs_for = target.context().kwargs
    images, mses = [], []
    accepted_total = 0
    snapshots = {}
    batch_index = 0
    while len(images) < target.max_generated and accepted_total < target.n_accept:
        n = min(batch_size, target.max_generated - len(images))
        kwargs = context_kwargs_for(n)
        canvas, snaps = p_sample_loop(
            model, n, sched, generator=generator, model_kwargs=kwargs,
            snapshot_steps=snapshot_steps if batch_index == 0 else (),
            clip_denoised=clip_denoised,
        )
        if batch_index == 0:
            snapshots = snaps
        bitmaps = crop_to_bitmap(canvas[:, 0])
        preds = surrogate_mod.predict(surrogate_model, bitmaps)
        batch_mse = np.mean((preds - target.behavior.energies[None, :]) ** 2, axis=1)
        if cache_dir is not None:
            cache_dir = Path(cache_dir)
            cache_dir.mkdir(parents=True, exist_ok=True)
            np.save(cache_dir / f"batch_{batch_index:05d}.npy", bitmaps)
        images.append(bitmaps)
        mses.append(batch_mse)
        accepted_total += int((batch_mse < target.mse_limit).sum())
        batch_index += 1
        if progress:
            print(f"generated {sum(len(b) for b in images)}, "
                  f"accepted so far {min(accepted_total, target.n_accept)}", flush=True)

    images = np.concatenate(images) if images else np.zeros((0, 28, 28), dtype=np.uint8)
    mses = np.concatenate(mses) if mses else np.zeros(0)
    passing = mses < target.mse_limit
    # accept in generation order, capped at n_accept
    accept_flags = np.zeros(len(mses), dtype=bool)
    accept_idx = np.nonzero(passing)[0][: target.n_accept]
    accept_flags[accept_idx] = True
    if accept_flags.sum() >= target.n_accept:
        status = "ok"
    elif accept_flags.any():
        status = "partial"
    else:
        status = "exhausted"
    report = _build_report(mses, accept_flags, target.mse_limit, seed, status, images)
    return images[accept_flags], report, snapshots


def refilter(images, mses, target: GenerationTarget, seed: int = 0):
    """Re-apply the acceptance policy to an existing generated pool."""
    mses = np.asarray(mses, dtype=np.float64)
    passing = mses < target.mse_limit
    accept_flags = np.zeros(len(mses), dtype=bool)
    accept_flags[np.nonzero(passing)[0][: target.n_accept]] = True
    status = ("ok" if accept_flags.sum() >= target.n_accept
              else "partial" if accept_flags.any() else "exhausted")
    report = _build_report(mses, accept_flags, target.mse_limit, seed, status,
                           np.asarray(images))
    return np.asarray(images)[accept_flags], report


def load_cached_batches(cache_dir):
    """Concatenate all cached generation batches from a directory."""
    files = sorted(Path(cache_dir).glob("batch_*.npy"))
    if not files:
        raise FileNotFoundError(f"no cached batches under {cache_dir}")
    return np.concatenate([np.load(f) for f in files])


def rank(report: FilterReport, top_k: int | None = None) -> np.ndarray:
    """Sample ids ordered by ascending surrogate MSE, ties broken by id."""
    if report.generated_count == 0:
        raise ValueError("cannot rank an empty report")
    order = np.lexsort((report.sample_ids, report.mses))
    ids = report.sample_ids[order]
    return ids[:top_k] if top_k is not None else ids


def validate_with_fem(images, surrogate_model, target: EnergyCurve, k: int,
                      normalization: float, subdivision: int = 2, poisson: float = 0.3,
                      schedule: LoadSchedule | None = None, jobs: int = 1,
                      newton_tol: float = 1e-8):
    """Re-score up to k accepted samples with the FEM solver.

    Returns a list of row dicts (sample_id, surrogate_mse, fem_mse, converged).
    FEM non-convergence is recorded per sample rather than raised.
    """
    images = np.asarray(images)[:k]
    rows = []
    preds = surrogate_mod.predict(surrogate_model, images) if len(images) else None
    args = [
        (i, images[i], subdivision, poisson, normalization, newton_tol,
         schedule.displacements if schedule else None)
        for i in range(len(images))
    ]
    if jobs > 1 and len(args) > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(jobs) as pool:
            fem_results = pool.map(_fem_validate_one, args)
    else:
        fem_results = [_fem_validate_one(a) for a in args]
    for i, (converged, energies) in enumerate(fem_results):
        row = {
            "sample_id": i,
            "surrogate_mse": surrogate_mod.mse(preds[i], target),
            "fem_mse": float("nan"),
            "converged": converged,
        }
        if converged:
            row["fem_mse"] = surrogate_mod.mse(energies, target)
        rows.append(row)
    return rows


def _fem_validate_one(args):
    index, bitmap, subdivision, poisson, normalization, newton_tol, disp = args
    field_obj = to_property_field(bitmap, poisson)
    schedule = LoadSchedule(disp) if disp is not None else None
    try:
        curve = run_uniaxial_extension(field_obj, schedule, subdivision,
                                       normalization=normalization, newton_tol=newton_tol)
    except NonConvergenceError:
        return False, None
    return True, curve.energies


def validation_summary(rows) -> dict:
    """Discrepancy statistics over the validation table."""
    ok = [r for r in rows if r["converged"]]
    out = {"validated": len(rows), "converged": len(ok)}
    if len(ok) >= 2:
        surr = np.array([r["surrogate_mse"] for r in ok])
        fem = np.array([r["fem_mse"] for r in ok])
        from scipy.stats import spearmanr

        rho = spearmanr(surr, fem).statistic
        out["rank_correlation"] = float(rho) if np.isfinite(rho) else 0.0
        out["mean_abs_diff"] = float(np.mean(np.abs(surr - fem)))
        out["max_fem_mse"] = float(fem.max())
    return out


def write_validation_csv(path, rows):
    lines = ["sample_id,surrogate_mse,fem_mse,converged"]
    for r in rows:
        lines.append(f"{r['sample_id']},{r['surrogate_mse']:.17g},"
                     f"{r['fem_mse']:.17g},{int(r['converged'])}")
    Path(path).write_text("\n".join(lines) + "\n")
