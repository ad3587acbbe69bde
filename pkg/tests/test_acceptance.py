"""The twelve acceptance criteria, each at its stated tolerance, seed count and runtime.

Each test stores a one-line summary in ``detail``; ``conftest.py`` prints
one PASS/FAIL line per criterion at the end of the session.
"""

import math
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy import integrate, linalg, stats

from clvm import baselines, clvm_em, cvae, data_model, metrics, num_core, variants, vi_engine as vi
from clvm.clvm_em import ClvmParams
from clvm.data_model import ContrastivePair
from clvm.num_core import GaussianSpec, RngStream

pytestmark = pytest.mark.acceptance


def detail(record_property, text):
    record_property("detail", text)


def subgroup_data(seed):
    raw = data_model.generate_synthetic_subgroups(seed=seed)
    std, _ = data_model.standardize(raw, "zscore")
    return raw, std


# ------------------------------------------------------------------- 1


def test_criterion_01_synthetic_subgroup_discovery(record_property):
    start = time.perf_counter()
    clvm_ari, pca_ari = [], []
    for seed in range(10):
        raw, pair = subgroup_data(seed)
        fit = clvm_em.fit_em(pair, 2, 2, seed=seed)
        clvm_ari.append(metrics.kmeans_ari(fit.target_t, raw.target_labels, seed=seed))
        # PCA sees the data as given, where the high-variance noise block dominates
        _, scores, _ = baselines.pca(raw.target, 2)
        pca_ari.append(metrics.kmeans_ari(scores, raw.target_labels, seed=seed))
    elapsed = time.perf_counter() - start
    hits = sum(a >= 0.9 for a in clvm_ari)
    detail(record_property, f"cLVM ARI>=0.9 in {hits}/10 seeds (min {min(clvm_ari):.3f}); "
                            f"PCA max ARI {max(pca_ari):.3f}; {elapsed:.1f}s")
    assert hits >= 9
    assert max(pca_ari) <= 0.5
    assert elapsed < 30


# ------------------------------------------------------------------- 2


def test_criterion_02_em_correctness(record_property):
    start = time.perf_counter()
    worst = math.inf
    for seed in range(50):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(5, 9))
        k, t = int(rng.integers(0, 3)), int(rng.integers(1, 3))
        x = rng.normal(size=(int(rng.integers(30, 80)), d)) @ rng.normal(size=(d, d))
        y = rng.normal(size=(int(rng.integers(30, 80)), d)) * rng.uniform(0.5, 2, size=d)
        fit = clvm_em.fit_em(ContrastivePair(x, y), k, t, max_iter=300, seed=seed)
        worst = min(worst, float(np.min(np.diff(fit.trace))))

    # k = 0: a background whose isotropic variance equals the target PPCA
    # noise makes PPCA on the target the joint optimum
    rng = np.random.default_rng(11)
    d = 8
    A = rng.normal(size=(d, 3)) * [3, 2, 1.5]
    x = rng.normal(size=(200, 3)) @ A.T + rng.normal(size=(200, d))
    ppca = baselines.fit_ppca(x, 2)
    y = rng.normal(size=(150, d))
    y -= y.mean(0)
    y *= math.sqrt(ppca.sigma2 * d / (np.sum(y**2) / len(y)))
    fit_k0 = clvm_em.fit_em(ContrastivePair(x, y), 0, 2, max_iter=20_000, rel_tol=1e-14, seed=1)
    oracle_k0 = ppca.log_likelihood(x) + baselines.ppca_log_likelihood(y, np.zeros((d, 0)), y.mean(0), ppca.sigma2)
    err_k0 = abs(fit_k0.trace[-1] - oracle_k0)

    # t = 0: pooled PPCA with per-set means
    rng = np.random.default_rng(12)
    pair = ContrastivePair(rng.normal(size=(80, 6)) * rng.uniform(0.5, 3, size=6), rng.normal(size=(70, 6)))
    res, mx, my = baselines.fit_ppca_pooled(pair, 2)
    oracle_t0 = clvm_em.log_likelihood(ClvmParams(res.loading, np.zeros((6, 0)), mx, my, res.sigma2), pair)
    init = ClvmParams(rng.normal(size=(6, 2)), np.zeros((6, 0)), np.zeros(6), np.zeros(6), 1.0)
    fit_t0 = clvm_em.fit_em(pair, 2, 0, init=init, max_iter=50_000, rel_tol=1e-15)
    err_t0 = abs(fit_t0.trace[-1] - oracle_t0)
    elapsed = time.perf_counter() - start
    detail(record_property, f"min step {worst:.2e} over 50 instances; |k=0 - PPCA| {err_k0:.1e}; "
                            f"|t=0 - PPCA| {err_t0:.1e}; {elapsed:.1f}s")
    assert worst >= -1e-8
    assert err_k0 < 1e-4 and err_t0 < 1e-4
    assert elapsed < 120


# ------------------------------------------------------------------- 3


def _conditioning_oracle(params, row, is_target):
    A = np.hstack([params.W, params.S]) if is_target else params.S
    mu = params.mu_x if is_target else params.mu_y
    q, d = A.shape[1], params.d
    cov = np.block([[np.eye(q), A.T], [A, A @ A.T + params.sigma2 * np.eye(d)]])
    return num_core.gaussian_condition(GaussianSpec(np.concatenate([np.zeros(q), mu]), cov), np.arange(q, q + d), row)


def test_criterion_03_posterior_oracle(record_property):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(3, 9))
        k, t = int(rng.integers(0, 3)), int(rng.integers(1, 3))
        params = ClvmParams(rng.normal(size=(d, k)), rng.normal(size=(d, t)), rng.normal(size=d),
                            rng.normal(size=d), rng.uniform(0.1, 2.0))
        row = rng.normal(size=d) * 2
        for is_target in (True, False):
            if not is_target and k == 0:
                continue
            pm = clvm_em.posterior_moments(params, row, is_target)
            oracle = _conditioning_oracle(params, row, is_target)
            mean, cov = oracle.mean, oracle.cov
            got = np.concatenate([pm.mean_t, pm.mean_z]) if is_target else pm.mean_z
            worst = max(worst, float(np.max(np.abs(got - mean))), float(np.max(np.abs(pm.cov - cov))))
    elapsed = time.perf_counter() - start
    detail(record_property, f"max abs deviation {worst:.1e} over 100 instances; {elapsed:.1f}s")
    assert worst < 1e-8
    assert elapsed < 10


# ------------------------------------------------------------------- 4

GRADIENT_VARIANTS = {
    "plain": {},
    "group": {"w_prior": "group", "rho": 2.0},
    "horseshoe": {"w_prior": "horseshoe"},
    "ard": {"s_prior": "ard"},
    "student_t": {"likelihood": "student_t"},
}


def _small_problem(seed):
    rng = np.random.default_rng(seed)
    pair = ContrastivePair(rng.normal(size=(12, 6)) @ rng.normal(size=(6, 6)), rng.normal(size=(10, 6)))
    return data_model.delete_target_cells(pair, 0.2, seed=seed)


def _gradient_check(spec, pair, seed, draws=400, coords=10, h=1e-5):
    state, params = vi.init_state(spec, pair, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for store in (state.blocks, params):
        for key in store:
            store[key] = store[key] + 0.1 * rng.normal(size=store[key].shape)
    stores = [("lam", key) for key in state.blocks] + [("th", key) for key in params]
    picks = []
    for _ in range(coords):
        where, key = stores[rng.integers(len(stores))]
        arr = state.blocks[key] if where == "lam" else params[key]
        picks.append((where, key, tuple(int(rng.integers(0, s)) for s in arr.shape)))
    grads = np.zeros((draws, coords))
    stream = RngStream(seed).child("grad")
    for i in range(draws):
        _, g_lam, g_th = vi.elbo_gradient(spec, state, params, pair, n_mc=1, rng=stream)
        for c, (where, key, idx) in enumerate(picks):
            grads[i, c] = (g_lam if where == "lam" else g_th)[key][idx]
    fds = np.zeros((draws, coords))
    for c, (where, key, idx) in enumerate(picks):
        arr = state.blocks[key] if where == "lam" else params[key]
        old = arr[idx]
        arr[idx] = old + h
        plus = vi.elbo_samples(spec, state, params, pair, draws, RngStream(seed).child(f"fd{c}"))
        arr[idx] = old - h
        minus = vi.elbo_samples(spec, state, params, pair, draws, RngStream(seed).child(f"fd{c}"))
        arr[idx] = old
        fds[:, c] = (plus - minus) / (2 * h)
    se = np.sqrt(grads.var(axis=0, ddof=1) / draws + fds.var(axis=0, ddof=1) / draws)
    gap = np.abs(grads.mean(axis=0) - fds.mean(axis=0))
    return gap, se


def test_criterion_04_vi_gradient_fidelity(record_property):
    start = time.perf_counter()
    worst_ratio, failures = 0.0, []
    for i, (name, kw) in enumerate(sorted(GRADIENT_VARIANTS.items())):
        spec = vi.ModelSpec(d=6, k=2, t=2, **kw)
        gap, se = _gradient_check(spec, _small_problem(20 + i), 20 + i)
        ratio = gap / np.maximum(se, 1e-12)
        ok = gap <= 3 * se + 1e-7
        worst_ratio = max(worst_ratio, float(np.max(np.where(ok, ratio, np.inf))))
        if not ok.all():
            failures.append(name)
    rng = np.random.default_rng(3)
    mean, ls = rng.normal(size=5), rng.uniform(-1, 0.5, size=5)
    draws = mean + np.exp(ls) * rng.standard_normal((100_000, 5))
    log_ratio = (stats.norm.logpdf(draws, mean, np.exp(ls)) - stats.norm.logpdf(draws)).sum(axis=1)
    kl_gap = abs(vi.kl_standard_normal(mean, ls) - log_ratio.mean())
    kl_se = log_ratio.std(ddof=1) / math.sqrt(log_ratio.size)
    elapsed = time.perf_counter() - start
    detail(record_property, f"10 coords x 5 variants, worst gap {worst_ratio:.2f} SE, failing {failures or 'none'}; "
                            f"KL gap {kl_gap / kl_se:.2f} SE; {elapsed:.1f}s")
    assert not failures
    assert kl_gap <= 3 * kl_se
    assert elapsed < 300


# ------------------------------------------------------------------- 5


def test_criterion_05_missing_data_robustness(record_property):
    start = time.perf_counter()
    drops = {0.25: [], 0.5: []}
    for seed in range(5):
        raw, pair = subgroup_data(seed)
        spec = vi.ModelSpec(d=30, k=2, t=2)
        base = metrics.kmeans_ari(vi.fit_vi(spec, pair, seed=seed)[0].target_t, raw.target_labels, seed=seed)
        for frac in drops:
            holed, _ = data_model.standardize(data_model.delete_target_cells(raw, frac, seed=seed), "zscore")
            fit, _ = vi.fit_vi(spec, holed, seed=seed)
            drops[frac].append(base - metrics.kmeans_ari(fit.target_t, raw.target_labels, seed=seed))
    elapsed = time.perf_counter() - start
    med25, med50 = float(np.median(drops[0.25])), float(np.median(drops[0.5]))
    detail(record_property, f"median ARI drop {med25:.3f} at 25%, {med50:.3f} at 50%; {elapsed:.1f}s")
    assert med25 <= 0.15 and med50 <= 0.3
    assert elapsed < 600


# ------------------------------------------------------------------- 6


def test_criterion_06_robust_variant(record_property):
    start = time.perf_counter()
    wins, gaps = 0, []
    for seed in range(10):
        raw, clean = subgroup_data(seed)
        reference = clvm_em.fit_em(clean, 2, 2, seed=seed).target_t
        dirty, _ = data_model.standardize(data_model.inject_outliers(raw, 20, -20.0, 20.0, seed=100 + seed), "zscore")
        dist = {}
        for name, kw in (("gaussian", {}), ("robust", {"likelihood": "student_t"})):
            fit, _ = vi.fit_vi(vi.ModelSpec(d=30, k=2, t=2, **kw), dirty, seed=seed)
            dist[name] = metrics.procrustes_distance(reference, fit.target_t[: raw.n])
        wins += dist["robust"] < dist["gaussian"]
        gaps.append(dist["gaussian"] - dist["robust"])
    elapsed = time.perf_counter() - start
    detail(record_property, f"robust closer to clean latent in {wins}/10 seeds "
                            f"(smallest margin {min(gaps):.4f}); {elapsed:.1f}s")
    assert wins >= 9
    assert elapsed < 600


# ------------------------------------------------------------------- 7


def test_criterion_07_ard_rank_recovery(record_property):
    start = time.perf_counter()
    summary, ok = [], True
    d = 30
    for r in (2, 3, 5):
        ranks = []
        for seed in range(10):
            rng = np.random.default_rng(1000 * r + seed)
            params = ClvmParams(rng.normal(size=(d, r)), rng.normal(size=(d, 2)), np.zeros(d), np.zeros(d), 1.0)
            pair = data_model.generate_from_model(params, [[0.0, 0.0]], 400, 400, seed=1000 * r + seed)
            fit, _ = vi.fit_vi(vi.ModelSpec(d=d, k=10, t=2, s_prior="ard"), pair, seed=seed)
            ranks.append(variants.effective_shared_rank(fit))
        hits = sum(abs(x - r) <= 1 for x in ranks)
        ok &= hits >= 8
        summary.append(f"r={r}: {hits}/10")
    elapsed = time.perf_counter() - start
    detail(record_property, f"rank within 1: {', '.join(summary)}; {elapsed:.1f}s")
    assert ok
    assert elapsed < 600


# ------------------------------------------------------------------- 8

RHO_GRID = (4.0, 40.0, 100.0, 200.0, 400.0)


def _noise_ratio(W):
    norms = variants.row_norms(W)
    return float(np.max(norms[20:]) / np.median(norms[:20]))


def test_criterion_08_sparsity_recovery(record_property):
    start = time.perf_counter()
    group_ratios, selected, hs_ratios, hs_pruned = [], [], [], []
    for seed in range(5):
        _, pair = subgroup_data(seed)
        fits, sils = {}, []
        for rho in RHO_GRID:
            fit, _ = vi.fit_vi(vi.ModelSpec(d=30, k=2, t=2, w_prior="group", rho=rho), pair, seed=seed)
            fits[rho] = fit
            km = metrics.kmeans_labels(fit.target_t, 4, seed=seed)
            sils.append(metrics.silhouette(fit.target_t, km))
        rho = metrics.select_by_silhouette(RHO_GRID, sils)
        selected.append(rho)
        group_ratios.append(_noise_ratio(fits[rho].params.W))
        hs, _ = vi.fit_vi(vi.ModelSpec(d=30, k=2, t=2, w_prior="horseshoe"), pair, seed=seed)
        hs_ratios.append(_noise_ratio(hs.params.W))
        hs_pruned.append(int(hs.extras["pruned_rows"][20:].sum()))
    elapsed = time.perf_counter() - start
    group_ok = max(group_ratios) < 0.1
    hs_ok = max(hs_ratios) < 0.1
    detail(record_property, f"group penalty (selected rho {sorted(set(selected))}) max ratio {max(group_ratios):.3f} "
                            f"[{'ok' if group_ok else 'fail'}]; horseshoe max ratio {max(hs_ratios):.3f}, "
                            f"noise rows pruned {hs_pruned} [{'ok' if hs_ok else 'fail'}]; {elapsed:.1f}s")
    assert group_ok, "group penalty leaves noise rows above 10% of the signal median"
    assert hs_ok, "horseshoe leaves noise rows above 10% of the signal median"
    assert elapsed < 600


# ------------------------------------------------------------------- 9


def _ig_pdf(x, a, b):
    return math.exp(variants.inv_gamma_logpdf(x, a, b))


def _half_cauchy_by_mixture(a, b):
    def integrand(u):
        lam = math.exp(u)
        return _ig_pdf(a * a, 0.5, 1.0 / lam) * 2 * a * _ig_pdf(lam, 0.5, 1.0 / b**2) * lam

    return integrate.quad(integrand, -60, 60, epsabs=1e-13, epsrel=1e-12, limit=500)[0]


def _student_t_by_mixture(r, a, b):
    def integrand(u):
        s2 = math.exp(u)
        return stats.norm.pdf(r, scale=math.sqrt(s2)) * _ig_pdf(s2, a, b) * s2

    return integrate.quad(integrand, -60, 60, epsabs=1e-13, epsrel=1e-12, limit=500)[0]


def test_criterion_09_mixture_identities(record_property):
    start = time.perf_counter()
    hc = 0.0
    for a in np.linspace(0.05, 5.0, 20):
        exact = math.exp(variants.half_cauchy_logpdf(a, 1.0))
        hc = max(hc, abs(_half_cauchy_by_mixture(a, 1.0) - exact))
    st = 0.0
    for a in (0.5, 1.0, 2.0, 5.0):
        for b in (0.5, 1.0, 2.0, 5.0):
            nu, lam = variants.student_t_from_ig(a, b)
            for r in np.linspace(-4, 4, 9):
                exact = math.exp(variants.student_t_loglik([r], [0.0], nu, lam))
                st = max(st, abs(_student_t_by_mixture(r, a, b) - exact))
    elapsed = time.perf_counter() - start
    detail(record_property, f"half-Cauchy max err {hc:.1e} at 20 points; Student-t max err {st:.1e}; {elapsed:.1f}s")
    assert hc < 1e-5 and st < 1e-5
    assert elapsed < 60


# ------------------------------------------------------------------ 10


def _mini_cvae_gradients_ok():
    model = cvae.init_cvae(6, 2, 1, seed=0, decoder_hidden=(5, 4), encoder_hidden=(4, 5))
    rng = np.random.default_rng(0)
    for net in (model.dec_s, model.dec_t, model.enc_t, model.enc_s):
        for b in net.biases:
            b[:] = 0.3 * rng.normal(size=b.shape)
    model.mu_x, model.mu_y, model.log_s2 = rng.normal(size=6), rng.normal(size=6), 0.2
    x, y = rng.normal(size=(3, 6)), rng.normal(size=(2, 6))
    noise = cvae.draw_batch_noise(model, 3, 2, RngStream(1))
    _, grads = cvae.cvae_elbo_and_gradients(model, x, y, noise=noise)
    values = model.arrays()
    h, worst = 1e-5, 0.0
    for key in sorted(values):
        for idx in np.ndindex(values[key].shape):
            old = values[key][idx]
            values[key][idx] = old + h
            model.load(values)
            fp = cvae.cvae_elbo_and_gradients(model, x, y, noise=noise)[0]
            values[key][idx] = old - h
            model.load(values)
            fm = cvae.cvae_elbo_and_gradients(model, x, y, noise=noise)[0]
            values[key][idx] = old
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(fd - grads[key][idx]) / max(1.0, abs(fd)))
    model.load(values)
    return worst


def test_criterion_10_cvae_desk_scale(record_property):
    start = time.perf_counter()
    wins, sils = 0, []
    for seed in range(10):
        pair = cvae.digits_on_noise(seed=seed)
        fit = cvae.fit_cvae(pair, k=8, t=2, epochs=30, seed=seed)
        mean, _ = cvae.encode(fit.model, pair.target, True)
        sil = metrics.silhouette(mean[:, 8:], pair.target_labels)
        vae = cvae.fit_vae(pair.target, 10, epochs=30, seed=seed)
        vmean, _ = cvae.encode(vae.model, pair.target, True)
        vsil = metrics.silhouette(vmean, pair.target_labels)
        sils.append((sil, vsil))
        wins += sil >= 0.3 and sil > vsil
    worst_fd = _mini_cvae_gradients_ok()
    elapsed = time.perf_counter() - start
    detail(record_property, f"cVAE wins in {wins}/10 seeds (min cVAE silhouette {min(s for s, _ in sils):.2f}, "
                            f"max VAE {max(v for _, v in sils):.2f}); worst FD rel err {worst_fd:.1e}; {elapsed:.1f}s")
    assert wins >= 8
    assert worst_fd <= 1e-6
    assert elapsed < 900


# ------------------------------------------------------------------ 11


def test_criterion_11_cpca_limit(record_property):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        d, r = 6, 2
        basis = np.linalg.qr(rng.normal(size=(d, d)))[0]
        y = rng.normal(size=(300, r)) @ basis[:, :r].T * 3.0
        x = rng.normal(size=(300, d)) * rng.uniform(0.5, 3.0, size=d)
        pair = ContrastivePair(x, y)
        q = 2
        limit = baselines.cpca_nullspace_limit(pair, q)
        large = baselines.fit_cpca(pair, 1e6, q).projection
        worst = max(worst, float(np.max(linalg.subspace_angles(large, limit))))
    elapsed = time.perf_counter() - start
    detail(record_property, f"max principal angle {worst:.1e} rad over 10 rank-2 backgrounds; {elapsed:.2f}s")
    assert worst < 1e-2
    assert elapsed < 10


# ------------------------------------------------------------------ 12


def _cli(*argv):
    proc = subprocess.run([sys.executable, "-m", "clvm.cli", *map(str, argv)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def _snapshot(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_criterion_12_cli_determinism(tmp_path, record_property):
    start = time.perf_counter()
    mismatched = []
    runs = {}
    common = ["--seed", 13, "--threads", 1]
    src = tmp_path / "inputs"
    _cli("generate", "subgroups", *common, "--n-per-subgroup", 50, "--m-background", 200,
         "--with-outliers", 5, "--missing-fraction", 0.1, "--out-dir", src)
    data = ["--target", src / "target.csv", "--background", src / "background.csv", "--labels", src / "labels.csv"]
    _cli("fit", *data, *common, "--method", "vi", "--w-prior", "horseshoe", "--iters", 300, "--out-dir", src / "fit")
    full = tmp_path / "complete"
    _cli("generate", "subgroups", *common, "--n-per-subgroup", 50, "--m-background", 200, "--out-dir", full)
    complete = ["--target", full / "target.csv", "--background", full / "background.csv"]
    commands = {
        "generate": ["generate", "subgroups", *common, "--n-per-subgroup", 50, "--m-background", 200,
                     "--with-outliers", 5, "--missing-fraction", 0.1],
        "fit-em": ["fit", *complete, *common, "--method", "em", "--standardize", "center"],
        "fit-vi": ["fit", *data, *common, "--method", "vi", "--w-prior", "horseshoe", "--iters", 300],
        "fit-cvae": ["fit", *complete, *common, "--method", "cvae", "--epochs", 3, "--decoder-hidden", "16",
                     "--encoder-hidden", "16"],
        "transform": ["transform", "--model", src / "fit" / "model.json", *data, *common],
        "sweep": ["sweep", *data, *common, "--param", "rho", "--grid", "0,400", "--iters", 200, "--clusters", 4],
        "eval": ["eval", "--latents", src / "fit" / "latents.csv", "--reference", src / "fit" / "latents.csv",
                 *common],
    }
    for rep in ("a", "b"):
        runs[rep] = {}
        for name, argv in commands.items():
            out = tmp_path / rep / name
            _cli(*argv, "--out-dir", out)
            runs[rep][name] = _snapshot(out)
    for cmd in runs["a"]:
        if runs["a"][cmd] != runs["b"][cmd]:
            mismatched.append(cmd)
    elapsed = time.perf_counter() - start
    count = sum(len(v) for v in runs["a"].values())
    detail(record_property, f"{count} output files over {len(runs['a'])} runs of 5 commands, mismatched: {mismatched or 'none'}; {elapsed:.1f}s")
    assert not mismatched
    assert elapsed < 300
