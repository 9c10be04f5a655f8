"""Property suites run by ``fluxfl verify``; every suite uses fixed seeds."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..clustering import canonical_labels, dbscan_adaptive, kmeans_prior
from ..descriptor import AlignmentBounds, DescriptorLayout, PcaMap, laplace_noise, laplace_scales
from ..gaussmetric import GaussianSummary, check_prop1_bound, w2_gaussian_diag
from ..numcore import MlpModel, RngStream, derive_seed, loss, loss_and_grad
from . import oracles

VERIFY_SEED = 20240611


@dataclass
class SuiteResult:
    name: str
    checks: int = 0
    failures: int = 0
    seconds: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.failures == 0 and self.checks > 0

    def check(self, ok: bool, note: str = "") -> None:
        self.checks += 1
        if not ok:
            self.failures += 1
            if note and len(self.notes) < 5:
                self.notes.append(note)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.checks - self.failures}/{self.checks} checks ({self.seconds:.2f}s)"


def _stream(name: str) -> RngStream:
    return RngStream.derived(VERIFY_SEED, name)


def suite_prop1(pairs: int = 10_000, lambda_min: float = 0.5, lambda_max: float = 2.0) -> SuiteResult:
    """Lipschitz sandwich between diagonal W2 and the moment distance."""
    res = SuiteResult("prop1")
    rng = _stream("prop1")
    for i in range(pairs):
        dim = 1 + int(rng.integers(8, 1)[0])
        u = rng.uniforms(4 * dim)
        means = (u[: 2 * dim] - 0.5) * 4.0
        variances = lambda_min + u[2 * dim:] * (lambda_max - lambda_min)
        # Every tenth pair sits on the edges of the variance band.
        if i % 10 == 0:
            variances = np.where(u[2 * dim:] < 0.5, lambda_min, lambda_max)
        a = GaussianSummary(means[:dim], np.sqrt(variances[:dim]))
        b = GaussianSummary(means[dim:], np.sqrt(variances[dim:]))
        d2, w2, ok = check_prop1_bound(a, b, lambda_min, lambda_max, tol=1e-12)
        res.check(ok, f"pair {i}: delta^2={d2!r} w2^2={w2!r}")
    return res


def suite_bures(pairs: int = 1_000, tol: float = 1e-10) -> SuiteResult:
    """Diagonal fast path against the general Bures formula, plain and rotated."""
    res = SuiteResult("bures")
    rng = _stream("bures")
    for i in range(pairs):
        dim = 1 + int(rng.integers(6, 1)[0])
        mu_a, mu_b = rng.normals(dim) * 2.0, rng.normals(dim) * 2.0
        sd_a = 0.1 + 2.0 * rng.uniforms(dim)
        sd_b = 0.1 + 2.0 * rng.uniforms(dim)
        fast = w2_gaussian_diag(GaussianSummary(mu_a, sd_a), GaussianSummary(mu_b, sd_b))
        if i % 2 == 0:
            dense = oracles.w2_gaussian(mu_a, np.diag(sd_a**2), mu_b, np.diag(sd_b**2))
        else:
            # Commuting pair: both covariances share the eigenbasis q.
            q = oracles.random_rotation(dim, rng.normals(dim * dim))
            dense = oracles.w2_gaussian(q @ mu_a, q @ np.diag(sd_a**2) @ q.T, q @ mu_b, q @ np.diag(sd_b**2) @ q.T)
        res.check(abs(fast - dense) <= tol * max(1.0, fast), f"pair {i}: fast={fast!r} dense={dense!r}")
    return res


def suite_dp(n: int = 100_000, draws: int = 10_000) -> SuiteResult:
    """Laplace sampler moments, tail bound at large epsilon, and stream determinism."""
    res = SuiteResult("dp")
    b = 0.37
    x = laplace_noise(_stream("dp-moments"), np.full(n, b))
    res.check(abs(x.mean()) <= 3.0 * b / np.sqrt(n), f"mean {x.mean()!r}")
    res.check(abs(np.abs(x).mean() - b) <= 0.05 * b, f"mean abs deviation {np.abs(x).mean()!r}")
    res.check(np.array_equal(x, laplace_noise(_stream("dp-moments"), np.full(n, b))), "sampler not deterministic")

    v, l, U, s, eps = 12, 4, 3, 150, 1e6
    rng = _stream("dp-tail")
    bounds = AlignmentBounds(-rng.uniforms(v), 1.0 + rng.uniforms(v))
    comps = oracles.random_rotation(v, rng.normals(v * v))[:l]
    pca = PcaMap(np.zeros(v), comps)
    layout = DescriptorLayout(l, U)
    scales = laplace_scales(pca, bounds, layout, s, eps)
    noise = laplace_noise(rng, np.tile(scales, draws)).reshape(draws, -1)
    ranges = scales * s * eps
    frac = np.mean(np.abs(noise) >= 10.0 * ranges / (s * eps), axis=0)
    res.check(bool(np.all(frac <= 1e-3)), f"tail fraction {frac.max()!r}")
    expected = np.tile(np.concatenate([np.abs(comps) @ bounds.width, 0.5 * np.abs(comps) @ bounds.width]), U + 1)
    res.check(np.allclose(ranges, expected, rtol=1e-12), "range vector mismatch")
    return res


def _blob_points(rng: RngStream, n_blobs: int, per_blob: int, dim: int, spread: float) -> np.ndarray:
    centers = rng.normals(n_blobs * dim).reshape(n_blobs, dim) * 10.0
    pts = np.repeat(centers, per_blob, axis=0) + spread * rng.normals(n_blobs * per_blob * dim).reshape(-1, dim)
    return pts[rng.permutation(pts.shape[0])]


def suite_partition(cases: int = 60) -> SuiteResult:
    """DBSCAN against the union-find reference, canonical ids, k-means descent."""
    res = SuiteResult("partition")
    rng = _stream("partition")
    for case in range(cases):
        n_blobs = 1 + int(rng.integers(4, 1)[0])
        per_blob = 2 + int(rng.integers(4, 1)[0])
        spread = 0.05 + rng.uniform()
        pts = _blob_points(rng, n_blobs, per_blob, 5, spread)
        if pts.shape[0] < 3:
            continue
        cs = dbscan_adaptive(pts)
        ref = oracles.reference_dbscan(pts, cs.epsilon, min_samples=2)
        res.check(np.array_equal(cs.assignment, ref), f"case {case}: dbscan differs from reference")
        res.check(np.array_equal(canonical_labels(cs.assignment), cs.assignment), f"case {case}: ids not canonical")
        res.check(sorted(set(cs.assignment.tolist())) == list(range(cs.M)), f"case {case}: ids not contiguous")
        M = min(n_blobs, pts.shape[0])
        km = kmeans_prior(pts, M, derive_seed(VERIFY_SEED, "kmeans", case))
        hist = np.asarray(km.inertia_history)
        res.check(bool(np.all(np.diff(hist) <= 1e-9 * max(1.0, hist[0]))), f"case {case}: inertia increased")
        res.check(km.M == M and min(km.sizes()) >= 1, f"case {case}: empty k-means cluster")
    return res


def suite_gradcheck(configs: int = 10, weights: int = 100, h: float = 1e-5, tol: float = 1e-4) -> SuiteResult:
    """Analytic MLP gradients against central finite differences."""
    res = SuiteResult("gradcheck")
    rng = _stream("gradcheck")
    for c in range(configs):
        n_in = 8 + int(rng.integers(8, 1)[0])
        hidden = 8 + int(rng.integers(8, 1)[0])
        n_out = 2 + int(rng.integers(5, 1)[0])
        batch = 4 + int(rng.integers(12, 1)[0])
        model = MlpModel.init(n_in, hidden, n_out, rng)
        x = rng.normals(batch * n_in).reshape(batch, n_in)
        y = rng.integers(n_out, batch)
        _, grad = loss_and_grad(model, x, y)
        idx = rng.choice(model.size, weights)
        num = oracles.finite_difference_grad(lambda p: loss(model, x, y, p), model.params, idx, h)
        ana = grad[idx]
        rel = np.abs(ana - num) / np.maximum(1e-6, np.maximum(np.abs(ana), np.abs(num)))
        for i in range(idx.size):
            res.check(rel[i] < tol, f"config {c} weight {idx[i]}: rel err {rel[i]:.2e}")
    return res


def suite_metric(triples: int = 1_000) -> SuiteResult:
    """W2 on diagonal Gaussians is a metric: identity, symmetry, triangle inequality."""
    res = SuiteResult("metric")
    rng = _stream("metric")
    for i in range(triples):
        dim = 1 + int(rng.integers(6, 1)[0])
        g = [GaussianSummary(rng.normals(dim), 0.1 + rng.uniforms(dim)) for _ in range(3)]
        ab, ba = w2_gaussian_diag(g[0], g[1]), w2_gaussian_diag(g[1], g[0])
        ac, cb = w2_gaussian_diag(g[0], g[2]), w2_gaussian_diag(g[2], g[1])
        res.check(w2_gaussian_diag(g[0], g[0]) == 0.0, f"triple {i}: d(a,a) != 0")
        res.check(ab == ba, f"triple {i}: asymmetric")
        res.check(ab <= ac + cb + 1e-12, f"triple {i}: triangle inequality violated")
    return res


SUITES = {
    "prop1": suite_prop1,
    "bures": suite_bures,
    "dp": suite_dp,
    "partition": suite_partition,
    "gradcheck": suite_gradcheck,
    "metric": suite_metric,
}


def run_suites(selector: str = "all") -> list[SuiteResult]:
    names = list(SUITES) if selector == "all" else [selector]
    out = []
    for name in names:
        t0 = time.perf_counter()
        r = SUITES[name]()
        r.seconds = time.perf_counter() - t0
        out.append(r)
    return out
