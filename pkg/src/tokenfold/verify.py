"""Self-contained invariant checks runnable from a fresh checkout.

Each check returns a CheckResult with a stable id, a pass flag and measured
values; run_all executes every check (none are skipped silently) and the CLI
maps any failure to a nonzero exit code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .decoder import assemble_frames, canonical_reference, extract_deltas
from .diffusion import igso3_density, igso3_lmax
from .dit import DiT, DiTConfig, compute_all_active, training_loss
from .errors import TokenfoldError
from .geometry import (
    BackboneFrames,
    RigidFrame,
    Rotation,
    aligned_rmsd,
    atoms_from_frames,
    compose,
    frames_from_atoms,
    invert,
    relative_frame,
)
from .ipa import ActivityMask, IPAConfig, IPALayer, count_report, ipa_cached, ipa_full
from .sampler import SamplerConfig, sample
from .synthetic import SyntheticFoldSpec, generate_synthetic_corpus
from .tokenizer import Codebook, boundary_margin, featurize, fit_codebook, tokenize


@dataclass
class CheckResult:
    check_id: str
    passed: bool
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extras = " ".join(f"{k}={v}" for k, v in self.details.items())
        return f"{status} {self.check_id} {extras}".rstrip()


def _random_frames(rng: np.random.Generator, L: int) -> BackboneFrames:
    spec = SyntheticFoldSpec.for_class(2, L, jitter=0.05)
    corpus = generate_synthetic_corpus([spec], seed=int(rng.integers(1 << 31)))
    return corpus[0][0]


def _random_rigid(rng: np.random.Generator) -> RigidFrame:
    return RigidFrame.random(rng)


def check_geometry_composition(seed: int = 0) -> CheckResult:
    """compose/invert/relative algebra closes to near machine precision."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(200):
        a, b = _random_rigid(rng), _random_rigid(rng)
        ident = compose(a, invert(a))
        worst = max(worst, float(np.abs(ident.rot.m - np.eye(3)).max()))
        worst = max(worst, float(np.abs(ident.trans).max()))
        rel = relative_frame(a, b)
        worst = max(worst, float(np.abs(compose(a, rel).rot.m - b.rot.m).max()))
        worst = max(worst, float(np.abs(compose(a, rel).trans - b.trans).max()))
    return CheckResult("geometry-composition", worst < 1e-9, {"max_error": f"{worst:.3e}"})


def check_feature_invariance(codebook: Codebook | None = None, seed: int = 1,
                             n_backbones: int = 100, n_motions: int = 100) -> CheckResult:
    """Invariant features unchanged (1e-9) and tokens identical under random
    rigid motions, for margin-filtered residues."""
    rng = np.random.default_rng(seed)
    if codebook is None:
        codebook = _quick_codebook(seed)
    worst = 0.0
    token_violations = 0
    for i in range(n_backbones):
        frames = _random_frames(rng, 8 if i % 2 == 0 else 64)
        feats = featurize(frames, w=codebook.w)
        toks = tokenize(frames, codebook)
        margin = boundary_margin(frames, codebook)
        keep = margin > 1e-6
        for _ in range(n_motions):
            g = _random_rigid(rng)
            moved = frames.transformed(g)
            worst = max(worst, float(np.abs(featurize(moved, w=codebook.w) - feats).max()))
            token_violations += int(np.sum(tokenize(moved, codebook)[keep] != toks[keep]))
    passed = worst < 1e-9 and token_violations == 0
    return CheckResult(
        "feature-invariance", passed,
        {"max_feature_dev": f"{worst:.3e}", "token_violations": token_violations},
    )


def check_roundtrip(seed: int = 2) -> CheckResult:
    """Relative-transform extraction then reassembly reproduces the backbone,
    and transforming the reference transforms the result, both within 1e-8."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        frames = _random_frames(rng, 48)
        deltas = extract_deltas(frames)
        ref = frames[0]
        rebuilt = assemble_frames(deltas, ref)
        rmsd, _ = aligned_rmsd(atoms_from_frames(rebuilt).ca, atoms_from_frames(frames).ca)
        worst = max(worst, rmsd)
        g = _random_rigid(rng)
        moved = assemble_frames(deltas, compose(g, ref))
        expect = frames.transformed(g)
        worst = max(worst, float(np.abs(moved.translations - expect.translations).max()))
        worst = max(worst, float(np.abs(moved.rotations - expect.rotations).max()))
    return CheckResult("frame-roundtrip", worst < 1e-8, {"max_error": f"{worst:.3e}"})


def check_attention_error_sweep(
    seed: int = 3,
    L: int = 64,
    eps_list=(0.005, 0.01, 0.02, 0.05, 0.1),
) -> CheckResult:
    """Stale-token attention deviation grows at most linearly in the
    displacement threshold: max deviation nondecreasing in eps and
    deviation/eps within 3x of its median. Reports the fitted constant."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    d_model = 64
    layer = IPALayer(d_model, IPAConfig()).double()
    frames = _random_frames(rng, L)
    rot = torch.as_tensor(frames.rotations.copy())
    trans = torch.as_tensor(frames.translations.copy())
    h = torch.randn(L, d_model, dtype=torch.float64)
    bits = torch.zeros(L, dtype=torch.bool)
    bits[: L // 4] = True  # first quarter active, rest stale
    mask = ActivityMask(bits=bits, rho=float(bits.sum()) / L)

    with torch.no_grad():
        _, cache, _ = ipa_cached(layer, h, rot, trans, compute_all_active(L), None)
        devs = []
        for eps in eps_list:
            delta = torch.randn(L, d_model, dtype=torch.float64)
            delta = delta / delta.norm(dim=-1, keepdim=True) * eps
            h_new = h + delta
            exact = layer(h_new, rot, trans)
            approx, _, _ = ipa_cached(layer, h_new, rot, trans, mask, cache)
            devs.append(float((exact - approx).abs().max()))
    ratios = np.array(devs) / np.array(eps_list)
    med = float(np.median(ratios))
    nondecreasing = all(devs[i] <= devs[i + 1] + 1e-12 for i in range(len(devs) - 1))
    envelope = bool(np.all(ratios <= 3.0 * med) and np.all(ratios >= med / 3.0))
    return CheckResult(
        "attention-error-sweep", nondecreasing and envelope,
        {
            "C": f"{ratios.max():.4f}",
            "nondecreasing": nondecreasing,
            "ratio_spread": f"{ratios.max() / max(ratios.min(), 1e-300):.2f}",
        },
    )


def check_pair_accounting(seed: int = 4) -> CheckResult:
    """Instrumented pair-update counts equal 2aL - a^2 exactly."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    layer = IPALayer(32, IPAConfig()).double()
    mismatches = 0
    for L in (16, 64, 128):
        frames = _random_frames(rng, L)
        rot = torch.as_tensor(frames.rotations.copy())
        trans = torch.as_tensor(frames.translations.copy())
        h = torch.randn(L, 32, dtype=torch.float64)
        with torch.no_grad():
            _, cache, _ = ipa_cached(layer, h, rot, trans, compute_all_active(L), None)
            for a in (0, 1, L // 3, L):
                bits = torch.zeros(L, dtype=torch.bool)
                bits[:a] = True
                mask = ActivityMask(bits=bits, rho=a / L)
                _, _, counter = ipa_cached(layer, h, rot, trans, mask, cache)
                report = count_report(counter, mask)
                if counter.pair_updates != report["theoretical"]:
                    mismatches += 1
                if counter.pair_updates != 2 * a * L - a * a:
                    mismatches += 1
    return CheckResult("pair-accounting", mismatches == 0, {"mismatches": mismatches})


def check_gradients(seed: int = 5, coords_per_tensor: int = 2) -> CheckResult:
    """Backprop gradients match central finite differences (step 1e-5) to a
    relative error below 1e-4 on a 2-layer, width-8 model."""
    torch.manual_seed(seed)
    cfg = DiTConfig(
        n_layers=2, d_model=16, n_heads=2, d_ff=32, latent_dim=8, T=20,
        n_ipa_layers=1, max_len=16,
        ipa=IPAConfig(n_heads=2, d_head=8, n_query_points=2, n_value_points=2),
    )
    model = DiT(cfg)
    rng = np.random.default_rng(seed)
    frames = _random_frames(rng, 8)
    batch = {
        "x0": torch.randn(2, 8, 8, dtype=torch.float64),
        "t": torch.tensor([3, 15]),
        "c": torch.tensor([0, 1]),
        "eps": torch.randn(2, 8, 8, dtype=torch.float64),
        "frames": (
            torch.as_tensor(frames.rotations.copy()).expand(2, 8, 3, 3).clone(),
            torch.as_tensor(frames.translations.copy()).expand(2, 8, 3).clone(),
        ),
    }
    sched = _tiny_schedule(cfg.T)
    model.zero_grad(set_to_none=True)
    loss = training_loss(model, batch, sched, train=False)
    loss.backward()

    step = 1e-5
    worst = 0.0
    worst_name = ""
    gen = np.random.default_rng(seed + 1)
    with torch.no_grad():
        for name, p in model.named_parameters():
            grad = torch.zeros_like(p) if p.grad is None else p.grad
            flat = p.view(-1)
            gflat = grad.view(-1)
            for idx in gen.choice(flat.numel(), size=min(coords_per_tensor, flat.numel()), replace=False):
                orig = float(flat[idx])
                flat[idx] = orig + step
                up = float(training_loss(model, batch, sched, train=False))
                flat[idx] = orig - step
                down = float(training_loss(model, batch, sched, train=False))
                flat[idx] = orig
                fd = (up - down) / (2 * step)
                denom = max(abs(fd), abs(float(gflat[idx])), 1e-8)
                rel = abs(fd - float(gflat[idx])) / denom
                if rel > worst:
                    worst, worst_name = rel, name
    return CheckResult(
        "gradient-check", worst < 1e-4, {"max_rel_error": f"{worst:.2e}", "worst": worst_name}
    )


def _tiny_schedule(T: int):
    from .diffusion import make_schedule

    return make_schedule(T, "cosine")


def check_igso3(seed: int = 6) -> CheckResult:
    """Heat-kernel density integrates to 1 by quadrature for each sigma."""
    worst = 0.0
    omega = np.linspace(1e-6, np.pi, 20001)
    trapz = getattr(np, "trapezoid", np.trapz)
    for sigma in (0.1, 0.5, 1.0):
        dens = igso3_density(omega, sigma, igso3_lmax(sigma)) * (1.0 - np.cos(omega)) / np.pi
        worst = max(worst, abs(float(trapz(dens, omega)) - 1.0))
    return CheckResult("igso3-normalization", worst < 1e-6, {"max_dev": f"{worst:.3e}"})


def check_codebook_integrity(path=None, codebook: Codebook | None = None) -> CheckResult:
    """Loadable codebook with finite, distinct centroids and matching shapes."""
    try:
        if codebook is None:
            if path is None:
                codebook = _quick_codebook(0)
            else:
                codebook = Codebook.load(path)
        ok = (
            np.all(np.isfinite(codebook.centroids))
            and np.all(np.isfinite(codebook.embeddings))
            and codebook.centroids.shape[0] == codebook.embeddings.shape[0]
        )
        return CheckResult("codebook-integrity", bool(ok), {"K": codebook.K, "d": codebook.d})
    except (TokenfoldError, OSError, ValueError, KeyError) as exc:
        return CheckResult("codebook-integrity", False, {"error": repr(exc)})


def check_cache_exactness(models=None, seed: int = 7, n_seeds: int = 3, L: int = 32, T: int = 50) -> CheckResult:
    """eps_cache = 0 cached sampling is bit-identical to the cache-free
    reference sampler. Mechanical property, valid on untrained weights."""
    if models is None:
        models = _untrained_bundle(seed, T)
    sched = _tiny_schedule(T)
    worst_bits = 0
    for s in range(n_seeds):
        a = sample(SamplerConfig(length=L, seed=seed + s, T=T, eps_cache=0.0, use_cache=True), models, sched)[0]
        b = sample(SamplerConfig(length=L, seed=seed + s, T=T, eps_cache=0.0, use_cache=False), models, sched)[0]
        if not np.array_equal(a.z0, b.z0) or not np.array_equal(a.tokens, b.tokens):
            worst_bits += 1
    return CheckResult("cache-exactness", worst_bits == 0, {"mismatched_runs": worst_bits})


def _quick_codebook(seed: int) -> Codebook:
    specs = [SyntheticFoldSpec.for_class(c, 64, jitter=0.05) for c in (0, 1, 2)] * 60
    corpus = generate_synthetic_corpus(specs, seed=seed)
    feats = [featurize(frames, w=2) for frames, _ in corpus]
    return fit_codebook(feats, K=32, seed=seed, d=8, w=2)


def _untrained_bundle(seed: int, T: int):
    from .container import ModelBundle
    from .decoder import PairDecoder

    torch.manual_seed(seed)
    cb = _quick_codebook(seed)
    decoder = PairDecoder(cb.d)
    cfg = DiTConfig(
        n_layers=1, d_model=32, n_heads=2, d_ff=64, latent_dim=cb.d, T=T,
        n_ipa_layers=1, ipa=IPAConfig(n_heads=2, d_head=8, n_query_points=2, n_value_points=2),
    )
    return ModelBundle(codebook=cb, decoder=decoder, dit=DiT(cfg))


def run_all(codebook_path=None, models=None) -> list[CheckResult]:
    """Every check, in a stable order; nothing is skipped."""
    cb = None
    if models is not None:
        cb = models.codebook
    elif codebook_path is not None:
        loaded = check_codebook_integrity(path=codebook_path)
        if loaded.passed:
            cb = Codebook.load(codebook_path)
    results = [
        check_geometry_composition(),
        check_feature_invariance(codebook=cb),
        check_roundtrip(),
        check_attention_error_sweep(),
        check_pair_accounting(),
        check_gradients(),
        check_igso3(),
        check_codebook_integrity(path=codebook_path, codebook=cb),
        check_cache_exactness(models=models),
    ]
    return results
