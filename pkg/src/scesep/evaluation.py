"""Separation metrics, manifest evaluation, and the loss-kernel timing benchmark."""
from __future__ import annotations

import csv
import itertools
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .corpus import Mix, MixSpec, make_mix
from .dsp import DspConfig, Waveform
from .separate import reconstruct, separate_spectrogram
from .sce import EmbeddingNet, cosine_separation_report, sce_loss

SDR_CAP_DB = 60.0


def _samples(x) -> np.ndarray:
    return np.asarray(x.samples if isinstance(x, Waveform) else x, dtype=np.float64)


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, clipped to [-60, 60]. Inputs are truncated to equal length."""
    est, ref = _samples(estimate), _samples(reference)
    n = min(len(est), len(ref))
    est, ref = est[:n], ref[:n]
    ref_energy = ref @ ref
    if ref_energy <= 0:
        raise ValueError("si_sdr reference is silent")
    target = (est @ ref) / ref_energy * ref
    noise = est - target
    t2, n2 = target @ target, noise @ noise
    if t2 <= n2 * 10 ** (-SDR_CAP_DB / 10):  # includes a silent estimate
        return -SDR_CAP_DB
    if n2 <= t2 * 10 ** (-SDR_CAP_DB / 10):
        return SDR_CAP_DB
    return float(10 * np.log10(t2 / n2))


def sdr_matrix(estimates, references) -> np.ndarray:
    """M x K matrix of si_sdr(estimate k, reference m)."""
    return np.array([[si_sdr(e, r) for e in estimates] for r in references])


def best_permutation_sdr(estimates, references):
    """Injective assignment of references to estimates maximising mean SI-SDR.

    Returns ``(assignment, sdrs)``: reference ``m`` is matched to estimate
    ``assignment[m]`` with SI-SDR ``sdrs[m]``.
    """
    K, M = len(estimates), len(references)
    if K < M:
        raise ValueError(f"need at least as many estimates as references, got K={K} < M={M}")
    S = sdr_matrix(estimates, references)
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(K), M):
        score = np.mean([S[m, k] for m, k in enumerate(perm)])
        if score > best_score:
            best, best_score = perm, score
    return tuple(best), np.array([S[m, k] for m, k in enumerate(best)])


# ---------------------------------------------------------------------------
# evaluation over manifests


@dataclass
class SdrRow:
    mix_id: str
    mix_type: str
    source_idx: int
    sdr_mix_db: float
    sdr_est_db: float

    @property
    def improvement(self) -> float:
        return self.sdr_est_db - self.sdr_mix_db


@dataclass
class SdrReport:
    rows: list[SdrRow]
    embedding_stats: dict[str, dict] = field(default_factory=dict)

    def mixes(self) -> list[str]:
        return list(dict.fromkeys(r.mix_id for r in self.rows))

    def per_mix_improvement(self) -> dict[str, float]:
        out: dict[str, list[float]] = {}
        for r in self.rows:
            out.setdefault(r.mix_id, []).append(r.improvement)
        return {k: float(np.mean(v)) for k, v in out.items()}

    def aggregates(self) -> dict[str, tuple[float, float, float]]:
        """Mean (sdr_mix, sdr_est, improvement) per mix type plus ``all``."""
        groups: dict[str, list[SdrRow]] = {}
        for r in self.rows:
            groups.setdefault(r.mix_type, []).append(r)
        groups["all"] = list(self.rows)
        return {k: (float(np.mean([r.sdr_mix_db for r in v])),
                    float(np.mean([r.sdr_est_db for r in v])),
                    float(np.mean([r.improvement for r in v])))
                for k, v in groups.items() if v}

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["mix_id", "mix_type", "source_idx", "sdr_mix_db", "sdr_est_db", "sdr_improvement_db"])
            for r in self.rows:
                w.writerow([r.mix_id, r.mix_type, r.source_idx,
                            f"{r.sdr_mix_db:.4f}", f"{r.sdr_est_db:.4f}", f"{r.improvement:.4f}"])
            for mix_type, (a, b, c) in self.aggregates().items():
                w.writerow(["AGG", mix_type, "", f"{a:.4f}", f"{b:.4f}", f"{c:.4f}"])

    def table(self) -> str:
        lines = [f"{'mix_type':<10}{'sdr_mix':>10}{'sdr_est':>10}{'improve':>10}"]
        for k, (a, b, c) in self.aggregates().items():
            lines.append(f"{k:<10}{a:>10.2f}{b:>10.2f}{c:>10.2f}")
        return "\n".join(lines)


def ideal_mask_estimates(mix: Mix, cfg: DspConfig) -> list[Waveform]:
    """Resynthesise each source with the ground-truth loudest-source mask."""
    masks = np.moveaxis((mix.Y + 1) / 2, -1, 0)
    return [reconstruct(mix.X, m, cfg.preemphasis) for m in masks]


def score_mix(mix: Mix, estimates: list[Waveform], mix_id: str, mix_type: str) -> list[SdrRow]:
    assignment, sdrs = best_permutation_sdr(estimates, mix.sources)
    rows = []
    for m, ref in enumerate(mix.sources):
        rows.append(SdrRow(mix_id, mix_type, m, si_sdr(mix.mixture, ref), float(sdrs[m])))
    return rows


def _worker_count() -> int:
    env = os.environ.get("SCESEP_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(4, os.cpu_count() or 1))


def evaluate_set(net: EmbeddingNet | None, specs: list[MixSpec], K: int | None = None, cfg: DspConfig = DspConfig(),
                 ideal_mask: bool = False, seed: int = 0, frames: int | None = None) -> SdrReport:
    """Separate every mix and score it against its references.

    With ``ideal_mask`` the ground-truth binary mask replaces the model, giving
    the upper bound for binary masking; ``net`` may then be None. ``K=None``
    clusters each mix into as many sources as it has references.
    """
    if net is None and not ideal_mask:
        raise ValueError("a model is required unless ideal_mask is set")

    def one(i_spec):
        i, spec = i_spec
        mix = make_mix(spec, cfg, frames=frames)
        mix_id = spec.mix_id or str(i)
        if ideal_mask:
            return score_mix(mix, ideal_mask_estimates(mix, cfg), mix_id, spec.mix_type), None
        res = separate_spectrogram(net, mix.X, K or len(spec.speakers), cfg, seed)
        stats = cosine_separation_report(res.embeddings, mix.Y)
        return score_mix(mix, res.sources, mix_id, spec.mix_type), (mix_id, stats)

    workers = _worker_count()
    items = list(enumerate(specs))
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    rows, stats = [], {}
    for r, s in results:
        rows.extend(r)
        if s is not None:
            stats[s[0]] = s[1]
    return SdrReport(rows, stats)


# ---------------------------------------------------------------------------
# timing


@dataclass
class BenchReport:
    rows: list[dict]

    def ratios(self, kernel: str, key: str = "TF") -> list[float]:
        sel = sorted((r for r in self.rows if r["kernel"] == kernel), key=lambda r: r[key])
        return [b["median_s"] / a["median_s"] for a, b in zip(sel, sel[1:])]

    def table(self) -> str:
        lines = [f"{'kernel':<10}{'B':>5}{'T':>6}{'F':>6}{'E':>5}{'M':>3}{'median_s':>12}"]
        for r in self.rows:
            lines.append(f"{r['kernel']:<10}{r['B']:>5}{r['T']:>6}{r['F']:>6}{r['E']:>5}{r['M']:>3}"
                         f"{r['median_s']:>12.5f}")
        return "\n".join(lines)


def _time_interleaved(fns, reps: int, warmup: int = 2) -> list[list[float]]:
    """Round-robin timing so slow spells on a shared machine hit every kernel alike."""
    for fn in fns:
        for _ in range(warmup):
            fn()
    times: list[list[float]] = [[] for _ in fns]
    for _ in range(reps):
        for fn, ts in zip(fns, times):
            t0 = time.perf_counter()
            fn()
            ts.append(time.perf_counter() - t0)
    return times


def sce_loss_kernel(B, T, F, E, M, seed=0):
    """Closure running one sce_loss forward + backward on random inputs."""
    rng = np.random.default_rng(seed)
    Vi = ag.Tensor(rng.standard_normal((B, T, F, E)) * 0.1, requires_grad=True)
    Vo = ag.Tensor(rng.standard_normal((B, M, E)) * 0.1, requires_grad=True)
    Y = -np.ones((B, T, F, M))
    np.put_along_axis(Y, rng.integers(M, size=(B, T, F, 1)), 1.0, axis=-1)

    def run():
        Vi.zero_grad()
        Vo.zero_grad()
        ag.backward(sce_loss(Vi, Vo, Y))

    return run


def affinity_loss_kernel(B, T, F, E, M, seed=0):
    """Closure computing the pairwise-affinity objective ||VV^T - YY^T||_F^2 and its gradient.

    Kept as a plain numpy reference kernel; it is O((TF)^2 E) per mix.
    """
    rng = np.random.default_rng(seed)
    V = (rng.standard_normal((B, T * F, E)) * 0.1).astype(np.float32)
    Y = np.eye(M, dtype=np.float32)[rng.integers(M, size=(B, T * F))]

    def run():
        A = V @ np.swapaxes(V, 1, 2) - Y @ np.swapaxes(Y, 1, 2)
        loss = float(np.sum(A * A))
        grad = 4 * (A @ V)
        return loss, grad

    return run


def bench_loss(base=(8, 40, 129), E: int = 10, M: int = 2, factors=(1, 2, 4), reps: int = 20,
               affinity_base=(1, 20, 129), affinity_factors=(1, 2)) -> BenchReport:
    """Median sce_loss timings as T grows by ``factors``; optional affinity-kernel contrast.

    Sizes of one kernel are timed round-robin, one repetition each per round.
    """
    B, T, F = base
    rows = []
    shapes = [(B, T * k, F) for k in factors]
    times = _time_interleaved([sce_loss_kernel(b, t, f, E, M) for b, t, f in shapes], reps)
    for (b, t, f), ts in zip(shapes, times):
        rows.append(dict(kernel="sce", B=b, T=t, F=f, E=E, M=M, TF=t * f, median_s=float(np.median(ts)), reps=reps))
    if affinity_base:
        Ba, Ta, Fa = affinity_base
        shapes = [(Ba, Ta * k, Fa) for k in affinity_factors]
        times = _time_interleaved([affinity_loss_kernel(b, t, f, E, M) for b, t, f in shapes], reps)
        for (b, t, f), ts in zip(shapes, times):
            rows.append(dict(kernel="affinity", B=b, T=t, F=f, E=E, M=M, TF=t * f,
                             median_s=float(np.median(ts)), reps=reps))
    return BenchReport(rows)
